"""Independent brute-force verifiers for the library's closed-form claims.

Every optimality claim made by :mod:`altlora.optim` is re-derived here by a
deliberately different route: least-squares objectives are flattened to
normal-equation systems and solved column-by-column with a generic LU
solver, merged-weight updates are materialized densely, and optimizer
trajectories are replayed under gauge changes. This module is allowed to
allocate k x d verification buffers; it is exempt from the optimizer's
memory budget.

The named checks at the bottom produce a machine-readable report consumed
by ``altlora verify``.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field, replace

import numpy as np

from . import optim
from .adapter import (
    LINEAR_REGRESSION,
    TWO_LAYER_RELU,
    FullGradient,
    LoraLayer,
    ToyModel,
    forward,
    full_gradient,
    init_layer,
    lora_grads,
    merged_weight,
    mse_loss,
)
from .matcore import (
    RandomStream,
    ShapeMismatch,
    damped_gram_inverse,
    frobenius,
    gauge_sample,
    jacobi_svd,
    projector,
    rel_error,
)

LEFT_FACTOR = "left_factor"
RIGHT_FACTOR = "right_factor"
MOMENTUM_A = "momentum_a"
MOMENTUM_B = "momentum_b"


class SingularSystem(Exception):
    """Flattened normal-equation system is rank-deficient."""


class PreconditionViolated(Exception):
    """Inputs do not satisfy a check's stated precondition."""


# ---------------------------------------------------------------------------
# Least-squares oracle


def _solve_normal_columns(coef: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve coef @ z_j = rhs_j per column with a generic LU solve.

    Deliberately not the library's Cholesky path.
    """
    if np.linalg.matrix_rank(coef) < coef.shape[0]:
        raise SingularSystem(f"normal matrix of shape {coef.shape} is rank-deficient")
    out = np.empty_like(rhs)
    for j in range(rhs.shape[1]):
        out[:, j] = np.linalg.solve(coef, rhs[:, j])
    return out


def lstsq_oracle(objective: str, **inputs) -> np.ndarray:
    """Independent minimizer for the library's four projection objectives.

    left_factor:  min_Z || s B Z - G ||_F        (inputs b, g, s)
    right_factor: min_Z || s Z A - G ||_F        (inputs a, g, s)
    momentum_b:   min_Z || Mb Aold - Z Anew ||_F (inputs mb, a_old, a_new)
    momentum_a:   min_Z || Bold Ma - Bnew Z ||_F (inputs ma, b_old, b_new)

    Full-rank instances only (the oracle works at zero damping).
    """
    if objective == LEFT_FACTOR:
        b, g, s = inputs["b"], inputs["g"], float(inputs.get("s", 1.0))
        return _solve_normal_columns((s * s) * (b.T @ b), s * (b.T @ g))
    if objective == RIGHT_FACTOR:
        a, g, s = inputs["a"], inputs["g"], float(inputs.get("s", 1.0))
        # rows of Z decouple: (s^2 A A^T) z_i^T = s A g_i^T
        return _solve_normal_columns((s * s) * (a @ a.T), s * (a @ g.T)).T
    if objective == MOMENTUM_B:
        mb, a_old, a_new = inputs["mb"], inputs["a_old"], inputs["a_new"]
        target = mb @ a_old
        return _solve_normal_columns(a_new @ a_new.T, a_new @ target.T).T
    if objective == MOMENTUM_A:
        ma, b_old, b_new = inputs["ma"], inputs["b_old"], inputs["b_new"]
        target = b_old @ ma
        return _solve_normal_columns(b_new.T @ b_new, b_new.T @ target)
    raise ValueError(f"unknown objective {objective!r}")


def lstsq_residual(objective: str, z: np.ndarray, **inputs) -> float:
    """Frobenius residual of a candidate Z under the chosen objective."""
    if objective == LEFT_FACTOR:
        return frobenius(float(inputs.get("s", 1.0)) * inputs["b"] @ z - inputs["g"])
    if objective == RIGHT_FACTOR:
        return frobenius(float(inputs.get("s", 1.0)) * z @ inputs["a"] - inputs["g"])
    if objective == MOMENTUM_B:
        return frobenius(inputs["mb"] @ inputs["a_old"] - z @ inputs["a_new"])
    if objective == MOMENTUM_A:
        return frobenius(inputs["b_old"] @ inputs["ma"] - inputs["b_new"] @ z)
    raise ValueError(f"unknown objective {objective!r}")


# ---------------------------------------------------------------------------
# Merged-weight materializations


def equivalent_update(layer_before: LoraLayer, layer_after: LoraLayer) -> np.ndarray:
    """Dense change of the merged weight between two layer snapshots."""
    if (layer_before.k, layer_before.d) != (layer_after.k, layer_after.d):
        raise ShapeMismatch("layer snapshots have different shapes")
    return merged_weight(layer_after) - merged_weight(layer_before)


@dataclass
class DecompositionReport:
    """Projected terms of an alternating pair step and the joint cross term.

    projected_col_term / projected_row_term are the positive quantities the
    alternating pair subtracts from the merged weight; cross_term is the
    measured second-order excess of one joint step; residual_norm is the
    Frobenius defect of the alternating decomposition.
    """

    projected_col_term: np.ndarray
    projected_row_term: np.ndarray
    cross_term: np.ndarray
    residual_norm: float


def joint_cross_term(layer: LoraLayer, g, cfg: optim.TrainConfig) -> np.ndarray:
    """Explicit second-order term of one joint scaled step.

    (eta^2 / s) G A^T (A A^T + lam I)^-1 (B^T B + lam I)^-1 B^T G.
    """
    gm = g.g if isinstance(g, FullGradient) else np.asarray(g, dtype=np.float64)
    right = damped_gram_inverse(layer.a, "right", cfg.lam)
    left = damped_gram_inverse(layer.b, "left", cfg.lam)
    return (cfg.eta**2 / layer.s) * (gm @ layer.a.T @ right @ left @ layer.b.T @ gm)


def decompose_pair_step(layer: LoraLayer, g_t, g_half, cfg: optim.TrainConfig) -> DecompositionReport:
    """Split one A-phase + one B-phase against one joint step, densely.

    Runs both on copies with pure projected gradients (requires beta1 = 0
    and gamma = 0). The alternating update must equal the sum of the two
    projector terms exactly; the joint step differs by the cross term.
    """
    if cfg.beta1 != 0.0 or cfg.gamma != 0.0:
        raise ValueError("decomposition requires beta1 = 0 and gamma = 0")
    gt = g_t.g if isinstance(g_t, FullGradient) else np.asarray(g_t, dtype=np.float64)
    gh = g_half.g if isinstance(g_half, FullGradient) else np.asarray(g_half, dtype=np.float64)

    cfg_alt = replace(cfg, order=optim.A_FIRST)
    alt = layer.copy()
    st = optim.AltLoraState.init(alt)
    optim.altlora_step(alt, st, gt, cfg_alt)
    a_plus = alt.a.copy()
    optim.altlora_step(alt, st, gh, cfg_alt)
    dw_alt = equivalent_update(layer, alt)

    col_term = cfg.eta * (projector(layer.b, "column", cfg.lam) @ gt)
    row_term = cfg.eta * (gh @ projector(a_plus, "row", cfg.lam))
    residual = frobenius(dw_alt + col_term + row_term)

    joint = layer.copy()
    stj = optim.AltLoraState.init(joint)
    optim.baseline_step(optim.SCALEDGD_JOINT, joint, stj, gt, cfg)
    dw_joint = equivalent_update(layer, joint)
    cross = dw_joint + cfg.eta * (projector(layer.b, "column", cfg.lam) @ gt)
    cross = cross + cfg.eta * (gt @ projector(layer.a, "row", cfg.lam))

    return DecompositionReport(col_term, row_term, cross, residual)


# ---------------------------------------------------------------------------
# Gauge invariance


def projector_gauge_check(a1, b1, a2, b2, tol: float = 1e-9):
    """Do two factorizations of the same update share their projectors?

    Requires b1 @ a1 == b2 @ a2 (relative Frobenius 1e-10). Returns
    (passed, max_deviation) comparing column- and row-space projectors at
    zero damping.
    """
    prod_dev = rel_error(b2 @ a2, b1 @ a1)
    if prod_dev > 1e-10:
        raise PreconditionViolated(f"factor products differ by {prod_dev:.3e} > 1e-10")
    col_dev = rel_error(projector(b2, "column", 0.0), projector(b1, "column", 0.0))
    row_dev = rel_error(projector(a2, "row", 0.0), projector(a1, "row", 0.0))
    dev = max(col_dev, row_dev)
    return dev <= tol, dev


def _unpack_task(task):
    if hasattr(task, "model"):
        return task.model, task.x, task.y
    model, x, y = task
    return model, x, y


def gauge_map_layer(layer: LoraLayer, gauge: np.ndarray) -> LoraLayer:
    """Equivalent factorization (B R, R^-1 A) of the same merged weight."""
    return LoraLayer(layer.w0, np.linalg.solve(gauge, layer.a), layer.b @ gauge, layer.alpha)


def gauge_map_state(state: optim.AltLoraState, gauge: np.ndarray) -> optim.AltLoraState:
    """Map optimizer state the way the factors map.

    A-shaped buffers pick up R^-1 on the left, B-shaped buffers R on the
    right; this is the unique mapping under which momentum realignment
    commutes with the gauge. Second moments have no consistent mapping
    (they are elementwise) and are copied unchanged.
    """
    mapped = state.copy()
    mapped.ma = np.linalg.solve(gauge, state.ma)
    mapped.mb = state.mb @ gauge
    mapped.prev_a = np.linalg.solve(gauge, state.prev_a)
    mapped.prev_b = state.prev_b @ gauge
    return mapped


def trajectory_invariance_check(
    task,
    cfg: optim.TrainConfig,
    gauge: np.ndarray,
    steps: int,
    tol: float = 1e-6,
    optimizer: str = optim.ALTLORA,
):
    """Per-step relative merged-weight deviation between gauge twins.

    Runs the optimizer from (A, B) and from (R^-1 A, B R) with state mapped
    accordingly, on the same task and step schedule, and reports
    ||W1_t - W2_t||_F / ||W1_t||_F after every step. Returns
    (passed, deviations); passed means every step stayed within tol.
    """
    model, x, y = _unpack_task(task)
    stepper = optim.make_stepper(optimizer)

    run1 = model.copy()
    run2 = model.copy()
    run2.layer = gauge_map_layer(model.layer, gauge)
    st1 = optim.make_state(optimizer, run1.layer)
    st2 = gauge_map_state(st1, gauge) if optimizer in (optim.ALTLORA,) else optim.make_state(
        optimizer, run2.layer
    )

    devs = np.empty(steps)
    for t in range(steps):
        for mdl, st in ((run1, st1), (run2, st2)):
            _, cache = forward(mdl, x)
            g = full_gradient(mdl, x, y, cache)[0]
            stepper(mdl.layer, st, g, cfg)
        w1 = merged_weight(run1.layer)
        w2 = merged_weight(run2.layer)
        devs[t] = rel_error(w2, w1)
    return bool(devs.max() <= tol), devs


# ---------------------------------------------------------------------------
# Named check suite

REPORT_SCHEMA = "altlora-check-report/1"


@dataclass
class CheckResult:
    name: str
    instances: int
    max_deviation: float
    passed: bool
    info: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "instances": self.instances,
            "max_deviation": self.max_deviation,
            "passed": bool(self.passed),
            "info": self.info,
        }


def _random_instance(stream: RandomStream, r_max: int = 8, dim_max: int = 64):
    r = 1 + int(stream.uniform() * r_max)
    k = r + int(stream.uniform() * (dim_max - r))
    d = r + int(stream.uniform() * (dim_max - r))
    s = float(np.exp(stream.normal()))
    return k, d, r, s


def _check_gram_inverse_identity(seed: int, instances: int = 200) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for _ in range(instances):
        k, d, r, _ = _random_instance(stream)
        m = stream.normal(k, r)
        lam = float(np.exp(stream.normal() - 3.0))
        inv = damped_gram_inverse(m, "left", lam)
        gram = m.T @ m + lam * np.eye(r)
        worst = max(worst, rel_error(inv @ gram, np.eye(r)))
    return CheckResult("gram_inverse_identity", instances, worst, worst <= 1e-9)


def _check_projector_idempotence(seed: int, instances: int = 100) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for _ in range(instances):
        k, d, r, _ = _random_instance(stream)
        b = stream.normal(k, r)
        a = stream.normal(r, d)
        for m, space in ((b, "column"), (a, "row")):
            p = projector(m, space, 0.0)
            worst = max(worst, rel_error(p @ p, p))
            worst = max(worst, float(np.max(np.abs(p - p.T))) / max(frobenius(p), 1e-300))
        worst = max(worst, rel_error(projector(b, "column", 0.0) @ b, b))
    return CheckResult("projector_idempotence", instances, worst, worst <= 1e-10)


def _check_gauge_sample_quality(seed: int, instances: int = 50) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for i in range(instances):
        r = 1 + int(stream.uniform() * 8)
        cond = 1.0 + float(stream.uniform()) * 9.0
        g1 = gauge_sample(r, cond, seed + i)
        g2 = gauge_sample(r, cond, seed + i)
        if not np.array_equal(g1, g2):
            return CheckResult("gauge_sample_quality", instances, np.inf, False)
        sing = jacobi_svd(g1)[1]
        if sing[-1] <= 0.0:
            return CheckResult("gauge_sample_quality", instances, np.inf, False)
        worst = max(worst, max(0.0, sing[0] / sing[-1] - cond))
    return CheckResult("gauge_sample_quality", instances, worst, worst <= 1e-9)


def _lstsq_check(name: str, seed: int, instances: int = 200) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for _ in range(instances):
        k, d, r, s = _random_instance(stream)
        g = stream.normal(k, d)
        if name == "lstsq_scaled_grad_a":
            b = stream.normal(k, r)
            grad_a = s * (b.T @ g)
            got = optim.scaled_grad_a(grad_a, b, s, 0.0)
            want = lstsq_oracle(LEFT_FACTOR, b=b, g=g, s=s)
        elif name == "lstsq_scaled_grad_b":
            a = stream.normal(r, d)
            grad_b = s * (g @ a.T)
            got = optim.scaled_grad_b(grad_b, a, s, 0.0)
            want = lstsq_oracle(RIGHT_FACTOR, a=a, g=g, s=s)
        elif name == "lstsq_align_momentum_b":
            mb = stream.normal(k, r)
            a_old = stream.normal(r, d)
            a_new = stream.normal(r, d)
            got = optim.align_momentum_b(mb, a_old, a_new, 0.0)
            want = lstsq_oracle(MOMENTUM_B, mb=mb, a_old=a_old, a_new=a_new)
        elif name == "lstsq_align_momentum_a":
            ma = stream.normal(r, d)
            b_old = stream.normal(k, r)
            b_new = stream.normal(k, r)
            got = optim.align_momentum_a(ma, b_old, b_new, 0.0)
            want = lstsq_oracle(MOMENTUM_A, ma=ma, b_old=b_old, b_new=b_new)
        else:
            raise ValueError(name)
        worst = max(worst, rel_error(got, want))
    return CheckResult(name, instances, worst, worst <= 1e-9)


def _check_lstsq_local_minimality(seed: int, instances: int = 5, probes: int = 1000) -> CheckResult:
    stream = RandomStream(seed)
    for _ in range(instances):
        k, d, r, s = 16, 32, 4, 1.0
        b = stream.normal(k, r)
        g = stream.normal(k, d)
        z = lstsq_oracle(LEFT_FACTOR, b=b, g=g, s=s)
        base = lstsq_residual(LEFT_FACTOR, z, b=b, g=g, s=s)
        for _ in range(probes):
            delta = stream.normal(r, d)
            delta *= 1e-3 / frobenius(delta)
            perturbed = lstsq_residual(LEFT_FACTOR, z + delta, b=b, g=g, s=s)
            if perturbed <= base:
                return CheckResult("lstsq_local_minimality", instances, np.inf, False)
    return CheckResult("lstsq_local_minimality", instances, 0.0, True, {"probes": probes})


def _pair_instance(stream: RandomStream, k: int = 16, d: int = 32, r: int = 4):
    layer = LoraLayer(
        stream.normal(k, d) / np.sqrt(d),
        stream.normal(r, d),
        stream.normal(k, r),
        alpha=float(r),
    )
    g_t = stream.normal(k, d)
    g_half = stream.normal(k, d)
    return layer, g_t, g_half


def _check_pair_step_residual(seed: int, instances: int = 100) -> CheckResult:
    stream = RandomStream(seed)
    cfg = optim.TrainConfig(eta=0.05, beta1=0.0, lam=0.0)
    worst = 0.0
    for _ in range(instances):
        layer, g_t, g_half = _pair_instance(stream)
        rep = decompose_pair_step(layer, g_t, g_half, cfg)
        alt_norm = frobenius(rep.projected_col_term + rep.projected_row_term)
        worst = max(worst, rep.residual_norm / max(alt_norm, 1e-300))
    return CheckResult("pair_step_residual", instances, worst, worst <= 1e-10)


def _check_joint_cross_term(seed: int, instances: int = 100) -> CheckResult:
    stream = RandomStream(seed)
    cfg = optim.TrainConfig(eta=0.05, beta1=0.0, lam=0.0)
    worst = 0.0
    nonzero = True
    for _ in range(instances):
        layer, g_t, _ = _pair_instance(stream)
        rep = decompose_pair_step(layer, g_t, g_t, cfg)
        explicit = joint_cross_term(layer, g_t, cfg)
        worst = max(worst, rel_error(rep.cross_term, explicit))
        bound = 1e-8 * cfg.eta**2 * frobenius(g_t) ** 2
        nonzero = nonzero and frobenius(rep.cross_term) > bound
    return CheckResult(
        "joint_cross_term", instances, worst, worst <= 1e-10 and nonzero, {"nonzero": nonzero}
    )


def _check_eta_order_slopes(seed: int) -> CheckResult:
    stream = RandomStream(seed)
    k, d, r = 16, 32, 4
    # well-conditioned factors keep the row-projector term's eta dependence
    # far below the slope tolerance
    layer = LoraLayer(
        np.zeros((k, d)),
        gauge_sample(r, 2.0, seed) @ stream.normal(r, d) / np.sqrt(d),
        stream.normal(k, r) / np.sqrt(r),
        alpha=float(r),
    )
    g_t = stream.normal(k, d) / np.sqrt(d)
    g_half = stream.normal(k, d) / np.sqrt(d)
    etas = [1e-2, 1e-3, 1e-4]
    proj_norms, cross_norms = [], []
    for eta in etas:
        cfg = optim.TrainConfig(eta=eta, beta1=0.0, lam=0.0)
        rep = decompose_pair_step(layer, g_t, g_half, cfg)
        proj_norms.append(
            frobenius(rep.projected_col_term) + frobenius(rep.projected_row_term)
        )
        cross_norms.append(frobenius(rep.cross_term))
    log_etas = np.log(etas)
    proj_slope = float(np.polyfit(log_etas, np.log(proj_norms), 1)[0])
    cross_slope = float(np.polyfit(log_etas, np.log(cross_norms), 1)[0])
    dev = max(abs(proj_slope - 1.0), abs(cross_slope - 2.0))
    return CheckResult(
        "eta_order_slopes",
        len(etas),
        dev,
        dev <= 0.01,
        {"proj_slope": proj_slope, "cross_slope": cross_slope},
    )


def _check_projector_gauge_invariance(seed: int, instances: int = 200) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    k, d, r = 12, 20, 3
    for i in range(instances):
        a1 = stream.normal(r, d)
        b1 = stream.normal(k, r)
        gauge = gauge_sample(r, 10.0, seed + 1000 + i)
        a2 = np.linalg.solve(gauge, a1)
        b2 = b1 @ gauge
        _, dev = projector_gauge_check(a1, b1, a2, b2)
        worst = max(worst, dev)
    return CheckResult("projector_gauge_invariance", instances, worst, worst <= 1e-9)


def _invariance_task(stream: RandomStream, k: int = 16, d: int = 32, r: int = 4):
    """Linear-regression task with full-rank factors (safe at lam = 0)."""
    w0 = stream.normal(k, d) / np.sqrt(d)
    layer = LoraLayer(w0, stream.normal(r, d) / np.sqrt(d), stream.normal(k, r) / np.sqrt(r), float(r))
    teacher = w0 + stream.normal(k, d) / np.sqrt(d)
    x = stream.normal(d, 4 * d)
    y = teacher @ x
    return ToyModel(LINEAR_REGRESSION, layer), x, y


def _check_trajectory_invariance_altlora(seed: int, gauges: int = 20, steps: int = 50) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for i in range(gauges):
        task = _invariance_task(stream)
        gauge = gauge_sample(task[0].layer.r, 10.0, seed + 31 + i)
        for beta1 in (0.0, 0.9):
            cfg = optim.TrainConfig(eta=0.2, beta1=beta1, lam=0.0, order=optim.B_FIRST)
            _, devs = trajectory_invariance_check(task, cfg, gauge, steps)
            worst = max(worst, float(devs.max()))
    # informational only: behavior under nonzero weight decay is not part
    # of the gated claim but is recorded alongside it
    decay_task = _invariance_task(stream)
    decay_gauge = gauge_sample(decay_task[0].layer.r, 10.0, seed + 997)
    decay_cfg = optim.TrainConfig(eta=0.2, beta1=0.9, gamma=0.01, lam=0.0, order=optim.B_FIRST)
    _, decay_devs = trajectory_invariance_check(decay_task, decay_cfg, decay_gauge, steps)
    return CheckResult(
        "trajectory_invariance_altlora",
        gauges,
        worst,
        worst <= 1e-6,
        {"weight_decay_deviation_informational": float(decay_devs.max())},
    )


def _check_trajectory_invariance_negative_control(
    seed: int, gauges: int = 20, steps: int = 50
) -> CheckResult:
    """Elementwise-adaptive baseline must break gauge invariance."""
    stream = RandomStream(seed)
    least = np.inf
    cfg = optim.TrainConfig(eta=0.02, beta1=0.9, beta2=0.999, lam=0.0)
    for i in range(gauges):
        task = _invariance_task(stream)
        gauge = gauge_sample(task[0].layer.r, 10.0, seed + 97 + i)
        _, devs = trajectory_invariance_check(task, cfg, gauge, steps, optimizer=optim.LORA_ADAM)
        least = min(least, float(devs.max()))
    return CheckResult(
        "trajectory_invariance_negative_control",
        gauges,
        least,
        least > 1e-3,
        {"note": "max_deviation is the smallest observed divergence; it must exceed 1e-3"},
    )


def _check_lorapro_x_independence(seed: int, pairs: int = 50) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for _ in range(pairs):
        k, d, r, s = _random_instance(stream, r_max=6, dim_max=32)
        layer = LoraLayer(stream.normal(k, d), stream.normal(r, d), stream.normal(k, r), s * r)
        g = stream.normal(k, d)
        x1 = stream.normal(r, r)
        x2 = stream.normal(r, r)
        ga1, gb1 = optim.lorapro_equiv_grad(g, layer, x1, 1e-8)
        ga2, gb2 = optim.lorapro_equiv_grad(g, layer, x2, 1e-8)
        eq1 = optim.equivalent_gradient(ga1, gb1, layer)
        eq2 = optim.equivalent_gradient(ga2, gb2, layer)
        worst = max(worst, rel_error(eq2, eq1))
    return CheckResult("lorapro_x_independence", pairs, worst, worst <= 1e-10)


def fd_merged_gradient(model: ToyModel, x: np.ndarray, y: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the loss w.r.t. the merged weight."""
    layer = model.layer
    base = merged_weight(layer)
    grad = np.zeros_like(base)

    def loss_at(w):
        if model.kind == LINEAR_REGRESSION:
            return mse_loss(w @ x, y)
        return mse_loss(model.w2 @ np.maximum(w @ x, 0.0), y)

    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            wp = base.copy()
            wp[i, j] += step
            wm = base.copy()
            wm[i, j] -= step
            grad[i, j] = (loss_at(wp) - loss_at(wm)) / (2.0 * step)
    return grad


def fd_entrywise_deviation(got: np.ndarray, want: np.ndarray) -> float:
    """Worst per-entry relative error, floored against the gradient scale."""
    scale = float(np.max(np.abs(want)))
    floor = max(1e-3 * scale, 1e-12)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))


def _fd_models(seed: int):
    stream = RandomStream(seed)
    lin_layer = LoraLayer(stream.normal(3, 4), stream.normal(2, 4), stream.normal(3, 2), 4.0)
    lin = ToyModel(LINEAR_REGRESSION, lin_layer)
    x_lin = stream.normal(4, 6)
    y_lin = stream.normal(3, 6)
    relu_layer = LoraLayer(stream.normal(8, 3), stream.normal(2, 3), stream.normal(8, 2), 2.0)
    relu = ToyModel(TWO_LAYER_RELU, relu_layer, w2=stream.normal(3, 8))
    x_relu = stream.normal(3, 5)
    y_relu = stream.normal(3, 5)
    return (lin, x_lin, y_lin), (relu, x_relu, y_relu)


def _check_gradient_finite_difference(seed: int) -> CheckResult:
    worst = 0.0
    for model, x, y in _fd_models(seed):
        _, cache = forward(model, x)
        got = full_gradient(model, x, y, cache)[0].g
        want = fd_merged_gradient(model, x, y)
        worst = max(worst, fd_entrywise_deviation(got, want))
    return CheckResult("gradient_finite_difference", 2, worst, worst < 1e-6)


def _check_bzero_stall(seed: int) -> CheckResult:
    stream = RandomStream(seed)
    layer = init_layer(stream.normal(8, 12), r=2, init_a="kaiming", init_b="zero", seed=seed)
    g = stream.normal(8, 12)
    grad_a, _ = lora_grads(g, layer)
    scaled = optim.scaled_grad_a(grad_a, layer.b, layer.s, optim.DEFAULT_DAMPING)
    exact = bool(np.all(grad_a == 0.0) and np.all(scaled == 0.0))
    return CheckResult("bzero_stall", 1, 0.0 if exact else np.inf, exact)


def _check_state_budget(seed: int) -> CheckResult:
    shapes = [(8, 12, 2), (64, 64, 8), (128, 32, 4)]
    for k, d, r in shapes:
        stream = RandomStream(seed + k)
        layer = LoraLayer(stream.normal(k, d), stream.normal(r, d), stream.normal(k, r), float(r))
        for kind in (optim.ALTLORA, optim.ALTLORA_PLUS):
            st = optim.make_state(kind, layer)
            st.check_budget(layer)
            if st.entry_count() > 6 * (k * r + r * d):
                return CheckResult("state_budget", len(shapes), np.inf, False)
    return CheckResult("state_budget", len(shapes), 0.0, True)


def _check_equivalent_update_identity(seed: int, instances: int = 50) -> CheckResult:
    stream = RandomStream(seed)
    worst = 0.0
    for _ in range(instances):
        k, d, r, s = _random_instance(stream, r_max=6, dim_max=24)
        before = LoraLayer(stream.normal(k, d), stream.normal(r, d), stream.normal(k, r), s * r)
        da = stream.normal(r, d)
        db = stream.normal(k, r)
        after = LoraLayer(before.w0, before.a + da, before.b + db, before.alpha)
        got = equivalent_update(before, after)
        want = before.s * (db @ before.a + before.b @ da + db @ da)
        worst = max(worst, rel_error(got, want))
    return CheckResult("equivalent_update_identity", instances, worst, worst <= 1e-12)


CHECKS = {
    "gram_inverse_identity": _check_gram_inverse_identity,
    "projector_idempotence": _check_projector_idempotence,
    "projector_gauge_invariance": _check_projector_gauge_invariance,
    "gauge_sample_quality": _check_gauge_sample_quality,
    "lstsq_scaled_grad_a": lambda seed: _lstsq_check("lstsq_scaled_grad_a", seed),
    "lstsq_scaled_grad_b": lambda seed: _lstsq_check("lstsq_scaled_grad_b", seed),
    "lstsq_align_momentum_a": lambda seed: _lstsq_check("lstsq_align_momentum_a", seed),
    "lstsq_align_momentum_b": lambda seed: _lstsq_check("lstsq_align_momentum_b", seed),
    "lstsq_local_minimality": _check_lstsq_local_minimality,
    "pair_step_residual": _check_pair_step_residual,
    "joint_cross_term": _check_joint_cross_term,
    "eta_order_slopes": _check_eta_order_slopes,
    "trajectory_invariance_altlora": _check_trajectory_invariance_altlora,
    "trajectory_invariance_negative_control": _check_trajectory_invariance_negative_control,
    "lorapro_x_independence": _check_lorapro_x_independence,
    "gradient_finite_difference": _check_gradient_finite_difference,
    "bzero_stall": _check_bzero_stall,
    "state_budget": _check_state_budget,
    "equivalent_update_identity": _check_equivalent_update_identity,
}


def select_checks(pattern: str | None = None) -> list[str]:
    names = sorted(CHECKS)
    if pattern is None:
        return names
    return [n for n in names if fnmatch.fnmatchcase(n, pattern)]


def run_checks(pattern: str | None = None, seed: int = 1789) -> dict:
    """Run the (optionally filtered) check suite; returns the JSON report."""
    results = [CHECKS[name](seed) for name in select_checks(pattern)]
    return {
        "schema": REPORT_SCHEMA,
        "seed": seed,
        "passed": all(r.passed for r in results),
        "checks": [r.to_json() for r in results],
    }
