"""Desk-scale experiments: task generators, the runner, probes, accounting.

Tasks are synthetic analogues of fine-tuning toward a low-rank residual:
a teacher weight W* = W0 + Delta* with a controllable singular spectrum,
full-batch MSE, and deterministic generation per seed. The runner records
a metric stream (CSV schema below) plus a JSON-sidecar summary; the width
probe and the state/FLOP accounting back the structural experiments.

Condition number enters through two switches: the teacher residual
spectrum (default for the factorization task) or the input covariance
spectrum (default for the ReLU task).

CSV schema: ``step,loss,weight_err,grad_norm,state_entries,flops``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import optim
from .adapter import (
    LINEAR_REGRESSION,
    TWO_LAYER_RELU,
    INIT_POLICIES,
    ToyModel,
    forward,
    full_gradient,
    init_layer,
    merged_weight,
    mse_loss,
)
from .matcore import (
    RandomStream,
    _cholesky_factor,
    _solve_lower,
    frobenius,
    orthonormal_columns,
)

TASKS = ("lowrank", "two_layer_relu")
KAPPA_KNOBS = ("teacher", "input")

CSV_HEADER = "step,loss,weight_err,grad_norm,state_entries,flops"
LOSS_THRESHOLD = 1e-3
DIVERGENCE_LIMIT = 1e6


class InvalidSpec(Exception):
    """Experiment description violates its invariants."""


class DivergenceDetected(Exception):
    """Loss blew past the divergence limit; carries the partial record."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class ExperimentSpec:
    """Declarative description of one training run."""

    task: str = "lowrank"
    k: int = 32
    d: int = 32
    r: int = 8
    width: int = 128
    teacher_rank: int = 4
    kappa: float = 1.0
    optimizer: str = optim.ALTLORA
    train: optim.TrainConfig = field(default_factory=lambda: optim.TrainConfig(eta=0.5))
    init_a: str = "kaiming"
    init_b: str = "zero"
    alpha: float | None = None
    seed: int = 0
    eval_every: int = 10
    kappa_knob: str | None = None  # default depends on task

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidSpec(f"task must be one of {TASKS}, got {self.task!r}")
        if self.optimizer not in optim.OPTIMIZERS:
            raise InvalidSpec(f"unknown optimizer {self.optimizer!r}")
        if self.init_a not in INIT_POLICIES or self.init_b not in INIT_POLICIES:
            raise InvalidSpec(f"init policies must be among {INIT_POLICIES}")
        if self.kappa < 1.0:
            raise InvalidSpec(f"kappa must be >= 1, got {self.kappa}")
        if self.eval_every < 1:
            raise InvalidSpec(f"eval_every must be positive, got {self.eval_every}")
        if self.kappa_knob is None:
            self.kappa_knob = "teacher" if self.task == "lowrank" else "input"
        if self.kappa_knob not in KAPPA_KNOBS:
            raise InvalidSpec(f"kappa_knob must be one of {KAPPA_KNOBS}")
        k_eff = self.k if self.task == "lowrank" else self.width
        if not (1 <= self.teacher_rank <= self.r <= min(k_eff, self.d)):
            raise InvalidSpec(
                f"need teacher_rank <= r <= min(k, d); got r*={self.teacher_rank}, "
                f"r={self.r}, k={k_eff}, d={self.d}"
            )
        if self.task == "two_layer_relu" and self.width < 4 * self.d:
            raise InvalidSpec(f"relu task needs width >= 4 d, got {self.width} < {4 * self.d}")
        if self.alpha is not None and self.alpha <= 0.0:
            raise InvalidSpec(f"alpha must be positive, got {self.alpha}")
        if self.optimizer in (optim.ALTLORA, optim.ALTLORA_PLUS) and self.train.order == optim.JOINT:
            raise InvalidSpec("alternating optimizers take order a_first or b_first")

    @property
    def effective_alpha(self) -> float:
        return float(self.alpha) if self.alpha is not None else float(self.r)

    def to_dict(self) -> dict:
        train = {
            "eta": self.train.eta,
            "beta1": self.train.beta1,
            "beta2": self.train.beta2,
            "gamma": self.train.gamma,
            "lambda": self.train.lam,
            "order": self.train.order,
            "steps": self.train.steps,
            "eps": self.train.eps,
            "lora_plus_ratio": self.train.lora_plus_ratio,
            "bias_correction": self.train.bias_correction,
            "schedule": self.train.schedule,
            "warmup_ratio": self.train.warmup_ratio,
        }
        return {
            "task": self.task,
            "k": self.k,
            "d": self.d,
            "r": self.r,
            "width": self.width,
            "teacher_rank": self.teacher_rank,
            "kappa": self.kappa,
            "optimizer": self.optimizer,
            "train": train,
            "init_a": self.init_a,
            "init_b": self.init_b,
            "alpha": self.alpha,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "kappa_knob": self.kappa_knob,
        }


@dataclass
class Task:
    """Generated instance: the student model, data, and the teacher weight."""

    model: ToyModel
    x: np.ndarray
    y: np.ndarray
    teacher_weight: np.ndarray


@dataclass
class RunRecord:
    """Per-eval metric rows plus the terminal summary.

    Rows are (step, loss, weight_err, grad_norm, state_entries, flops);
    weight_err is the relative Frobenius distance of the merged weight to
    the teacher weight of the adapted layer. steps_to_threshold is the
    first step with loss <= 1e-3, or -1 if never reached.
    """

    rows: list
    steps_to_threshold: int = -1
    diverged: bool = False
    final_loss: float = math.nan

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for step, loss, werr, gnorm, entries, flops in self.rows:
            lines.append(f"{step},{loss!r},{werr!r},{gnorm!r},{entries},{flops}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_csv(text: str) -> "RunRecord":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {lines[0] if lines else '<empty>'}")
        rows = []
        for ln in lines[1:]:
            step, loss, werr, gnorm, entries, flops = ln.split(",")
            rows.append((int(step), float(loss), float(werr), float(gnorm), int(entries), int(flops)))
        rec = RunRecord(rows)
        rec.final_loss = rows[-1][1] if rows else math.nan
        return rec


# ---------------------------------------------------------------------------
# Task generation


def _log_spaced_spectrum(count: int, kappa: float, top: float = 1.0) -> np.ndarray:
    if count == 1:
        return np.array([top])
    return top * np.exp(np.linspace(0.0, -math.log(kappa), count))


def _conditioned_inputs(d: int, m: int, kappa: float, stream: RandomStream) -> np.ndarray:
    """Inputs whitened then reshaped so X X^T / m has spectrum spanning kappa."""
    z = stream.normal(d, m)
    cov = z @ z.T / m
    lo = _cholesky_factor(cov)
    white = _solve_lower(lo, z)
    q = orthonormal_columns(d, d, stream)
    lam = _log_spaced_spectrum(d, kappa)
    return (q * np.sqrt(lam)) @ (q.T @ white)


def gen_lowrank_task(spec: ExperimentSpec) -> Task:
    """Teacher W* = W0 + Delta*, Delta* rank r* with a log-spaced spectrum.

    Data is standard Gaussian d x 4d (or conditioned when the kappa knob is
    on the inputs); targets are exactly W* X. Deterministic per seed.
    """
    if spec.task != "lowrank":
        raise InvalidSpec(f"gen_lowrank_task got task {spec.task!r}")
    stream = RandomStream(spec.seed)
    k, d, rstar = spec.k, spec.d, spec.teacher_rank
    w0 = stream.normal(k, d) / math.sqrt(d)
    u = orthonormal_columns(k, rstar, stream)
    v = orthonormal_columns(d, rstar, stream)
    teacher_kappa = spec.kappa if spec.kappa_knob == "teacher" else 1.0
    sing = _log_spaced_spectrum(rstar, teacher_kappa)
    w_star = w0 + (u * sing) @ v.T
    m = 4 * d
    if spec.kappa_knob == "input":
        x = _conditioned_inputs(d, m, spec.kappa, stream)
    else:
        x = stream.normal(d, m)
    y = w_star @ x
    layer = init_layer(
        w0, spec.r, alpha=spec.effective_alpha, init_a=spec.init_a, init_b=spec.init_b, stream=stream
    )
    return Task(ToyModel(LINEAR_REGRESSION, layer), x, y, w_star)


def gen_relu_task(spec: ExperimentSpec) -> Task:
    """Over-parameterized two-layer ReLU student with adapted first layer.

    The teacher shares the frozen second layer and differs by a rank-r*
    perturbation of the first; by default the condition number rides on the
    input covariance spectrum.
    """
    if spec.task != "two_layer_relu":
        raise InvalidSpec(f"gen_relu_task got task {spec.task!r}")
    stream = RandomStream(spec.seed)
    n, d, rstar = spec.width, spec.d, spec.teacher_rank
    w1 = stream.normal(n, d) / math.sqrt(d)
    u = orthonormal_columns(n, rstar, stream)
    v = orthonormal_columns(d, rstar, stream)
    teacher_kappa = spec.kappa if spec.kappa_knob == "teacher" else 1.0
    sing = _log_spaced_spectrum(rstar, teacher_kappa)
    w1_star = w1 + (u * sing) @ v.T
    w2 = stream.normal(d, n) / math.sqrt(n)
    m = 4 * d
    if spec.kappa_knob == "input":
        x = _conditioned_inputs(d, m, spec.kappa, stream)
    else:
        x = stream.normal(d, m)
    y = w2 @ np.maximum(w1_star @ x, 0.0)
    layer = init_layer(
        w1, spec.r, alpha=spec.effective_alpha, init_a=spec.init_a, init_b=spec.init_b, stream=stream
    )
    return Task(ToyModel(TWO_LAYER_RELU, layer, w2=w2), x, y, w1_star)


def generate_task(spec: ExperimentSpec) -> Task:
    return gen_lowrank_task(spec) if spec.task == "lowrank" else gen_relu_task(spec)


# ---------------------------------------------------------------------------
# FLOP model (documented convention; a matmul (a x b)(b x c) costs 2abc)


def _task_flops(spec: ExperimentSpec) -> int:
    d = spec.d
    k = spec.k if spec.task == "lowrank" else spec.width
    r, m = spec.r, 4 * spec.d
    merge = 2 * k * r * d + k * d
    fwd = 2 * k * d * m
    loss = 3 * k * m
    bwd = 2 * k * d * m
    if spec.task == "two_layer_relu":
        out = d
        fwd += 2 * out * k * m + k * m
        bwd += 2 * out * k * m + k * m
    return merge + fwd + loss + bwd


def _optimizer_flops(spec: ExperimentSpec) -> int:
    k = spec.k if spec.task == "lowrank" else spec.width
    d, r = spec.d, spec.r
    factor_grad = 2 * k * r * d  # one factor gradient from G
    gram = 2 * r * r * max(k, d) + r**3  # form Gram + factorize
    solve = 2 * r * r * max(k, d)  # apply the inverse
    align = gram + 2 * r * r * max(k, d)
    axpy = 2 * r * max(k, d)
    kind = spec.optimizer
    if kind == optim.ALTLORA:
        return factor_grad + gram + solve + align + axpy
    if kind == optim.ALTLORA_PLUS:
        return factor_grad + gram + solve + align + 4 * r * max(k, d) + axpy
    if kind in (optim.LORA_SGD, optim.LORA_PLUS):
        return 2 * factor_grad + 2 * axpy
    if kind == optim.LORA_ADAM:
        return 2 * factor_grad + 8 * r * (k + d) + 2 * axpy
    if kind == optim.SCALEDGD_JOINT:
        return 2 * (factor_grad + gram + solve) + 2 * axpy
    raise InvalidSpec(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# Runner


def run_experiment(spec: ExperimentSpec) -> RunRecord:
    """Full-batch training loop; gradient recomputed before every phase.

    Records an eval row at step 0, every eval_every steps, and at the final
    step. Deterministic per spec. Raises DivergenceDetected (carrying the
    partial record) when the loss exceeds 1e6 or stops being finite.
    """
    task = generate_task(spec)
    model, x, y = task.model, task.x, task.y
    cfg = spec.train
    stepper = optim.make_stepper(spec.optimizer)
    state = optim.make_state(spec.optimizer, model.layer)
    flops_per_step = _task_flops(spec) + _optimizer_flops(spec)
    teacher_norm = max(frobenius(task.teacher_weight), 1e-300)

    rows: list = []
    steps_to_threshold = -1
    loss = math.nan
    for t in range(cfg.steps + 1):
        y_hat, cache = forward(model, x)
        loss = mse_loss(y_hat, y)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            rec = RunRecord(rows, steps_to_threshold, diverged=True, final_loss=loss)
            raise DivergenceDetected(f"loss {loss} at step {t}", rec)
        if steps_to_threshold < 0 and loss <= LOSS_THRESHOLD:
            steps_to_threshold = t
        g = full_gradient(model, x, y, cache)[0]
        if t % spec.eval_every == 0 or t == cfg.steps:
            werr = frobenius(merged_weight(model.layer) - task.teacher_weight) / teacher_norm
            rows.append((t, loss, werr, frobenius(g.g), state.entry_count(), t * flops_per_step))
        if t == cfg.steps:
            break
        eta_t = optim.effective_eta(cfg, t)
        step_cfg = cfg if eta_t == cfg.eta else replace(cfg, eta=eta_t)
        stepper(model.layer, state, g, step_cfg)
    return RunRecord(rows, steps_to_threshold, final_loss=loss)


# ---------------------------------------------------------------------------
# Width-scaling probe


@dataclass
class ProbeResult:
    widths: list
    magnitudes: list
    slope: float


def _probe_once(
    n: int,
    rank: int,
    seed: int,
    optimizer_kind: str,
    cfg: optim.TrainConfig,
    teacher_scale: float = 1.0,
) -> float:
    """One two-phase update on a width-n square layer; returns ||dW x||_inf.

    The teacher residual has rank-r singular values Theta(sqrt(n)) so its
    action on a Theta(1)-entry probe vector has Theta(1) entries, matching
    the stability convention the probe is calibrated against.
    """
    stream = RandomStream(seed)
    u = orthonormal_columns(n, rank, stream)
    v = orthonormal_columns(n, rank, stream)
    w_star = (u * (teacher_scale * math.sqrt(n))) @ v.T
    m = 2 * n
    x = stream.normal(n, m)
    y = w_star @ x
    layer = init_layer(np.zeros((n, n)), rank, init_a="kaiming", init_b="zero", stream=stream)
    model = ToyModel(LINEAR_REGRESSION, layer)
    stepper = optim.make_stepper(optimizer_kind)
    state = optim.make_state(optimizer_kind, layer)
    step_cfg = replace(cfg, order=optim.B_FIRST, steps=2)
    for _ in range(2):
        _, cache = forward(model, x)
        g = full_gradient(model, x, y, cache)[0]
        stepper(layer, state, g, step_cfg)
    dw = merged_weight(layer) - layer.w0
    probe = stream.normal(n, 1)
    return float(np.max(np.abs(dw @ probe)))


def width_scaling_probe(
    widths,
    optimizer_kind: str,
    cfg: optim.TrainConfig,
    rank: int = 4,
    seeds: int = 8,
    teacher_scale: float = 1.0,
) -> ProbeResult:
    """Feature-update magnitude versus width, with a fitted log-log slope.

    For each width the probe takes one B-phase plus one A-phase (two joint
    steps for joint baselines) from standard init and measures the merged
    update's action on a random probe vector, averaged over seeds. A slope
    near zero means width-stable feature updates.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 4 or any(b <= a for a, b in zip(widths, widths[1:])):
        raise InvalidSpec("widths must be strictly increasing with at least 4 values")
    magnitudes = []
    for n in widths:
        vals = [
            _probe_once(n, rank, 1000 * n + i, optimizer_kind, cfg, teacher_scale)
            for i in range(seeds)
        ]
        magnitudes.append(float(np.mean(vals)))
    if min(magnitudes) <= 0.0:
        return ProbeResult(widths, magnitudes, math.nan)
    slope = float(np.polyfit(np.log(widths), np.log(magnitudes), 1)[0])
    return ProbeResult(widths, magnitudes, slope)


# ---------------------------------------------------------------------------
# State accounting (Table-style space comparison; analytic, never allocated)


@dataclass
class StateAccounting:
    trainable: int
    optimizer_state: int
    peak_verification: int


# Factor-shaped buffer multiples per optimizer: persistent state plus the
# per-step work buffers of one update. One unit is (k r + r d) entries.
_STATE_UNITS = {
    optim.ALTLORA: 4,  # first moments, factor snapshots, raw + scaled gradients
    optim.ALTLORA_PLUS: 6,  # + second moments, bias-corrected direction
    optim.LORA_SGD: 1,  # raw gradients
    optim.LORA_PLUS: 1,
    optim.LORA_ADAM: 3,  # raw gradients + first + second moments
    optim.SCALEDGD_JOINT: 2,  # raw + scaled gradients
}

FULL_MOMENT = "lorapro_full_moment"


def state_accounting(k: int, d: int, r: int, method: str) -> StateAccounting:
    """Exact entry counts for trainables, optimizer state, and verification.

    The full-moment comparison layout keeps dense k x d first and second
    moments (2 k d entries); it is computed here for comparison and never
    allocated anywhere in the library. peak_verification is the dense
    merged-weight pair the oracle checks materialize; that allocation is
    exempt from the optimizer memory budget.
    """
    unit = k * r + r * d
    if method == FULL_MOMENT:
        state = 2 * k * d
    elif method in _STATE_UNITS:
        state = _STATE_UNITS[method] * unit
    else:
        raise InvalidSpec(f"unknown accounting method {method!r}")
    return StateAccounting(trainable=unit, optimizer_state=state, peak_verification=2 * k * d)
