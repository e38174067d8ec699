"""Optimizers over low-rank factor pairs.

The centerpiece is the alternating scheme: each step updates exactly one
factor with a Gram-preconditioned ("scaled") gradient, and the stored first
moment is re-expressed in the coordinates of the freshly updated opposite
factor before being mixed. That realignment is what keeps the momentum's
contribution to the merged weight intact across subspace changes, and it is
what the trajectory-invariance checks in :mod:`altlora.oracle` exercise.

Scaled gradients (one factor at a time, damping lam >= 0):

    scaled_grad_a = (1/s^2) (B^T B + lam I)^-1 grad_a
    scaled_grad_b = (1/s^2) grad_b (A A^T + lam I)^-1

Momentum realignment (old -> new opposite factor):

    align_momentum_a = (Bn^T Bn + lam I)^-1 Bn^T Bo M^A
    align_momentum_b = M^B Ao An^T (An An^T + lam I)^-1

Baselines (plain SGD on raw factor gradients, elementwise AdamW, a two-rate
variant, and a joint scaled-gradient stepper) share the same state record.
Nothing in this module ever allocates a k x d buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapter import FullGradient, LoraLayer, lora_grads
from .matcore import damped_gram_inverse

A_FIRST = "a_first"
B_FIRST = "b_first"
JOINT = "joint"

ALTLORA = "altlora"
ALTLORA_PLUS = "altlora_plus"
LORA_SGD = "lora_sgd"
LORA_ADAM = "lora_adam"
LORA_PLUS = "lora_plus"
SCALEDGD_JOINT = "scaledgd_joint"

OPTIMIZERS = (ALTLORA, ALTLORA_PLUS, LORA_SGD, LORA_ADAM, LORA_PLUS, SCALEDGD_JOINT)
BASELINES = (LORA_SGD, LORA_ADAM, LORA_PLUS, SCALEDGD_JOINT)

# Default Gram damping; removes full-rank requirements and makes the
# standard B = 0 initialization work without branching.
DEFAULT_DAMPING = 1e-6


@dataclass
class TrainConfig:
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    gamma: float = 0.0
    lam: float = DEFAULT_DAMPING
    order: str = B_FIRST
    steps: int = 1
    eps: float = 1e-8
    lora_plus_ratio: float = 16.0
    bias_correction: bool = True
    schedule: str = "constant"
    warmup_ratio: float = 0.0

    def __post_init__(self):
        if self.eta < 0.0:
            raise ValueError(f"learning rate must be nonnegative, got {self.eta}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.gamma < 0.0 or self.lam < 0.0:
            raise ValueError("gamma and lam must be nonnegative")
        if self.order not in (A_FIRST, B_FIRST, JOINT):
            raise ValueError(f"order must be one of a_first/b_first/joint, got {self.order!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be nonnegative, got {self.steps}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be constant or cosine, got {self.schedule!r}")


def effective_eta(cfg: TrainConfig, t: int) -> float:
    """Learning rate at step t under the configured schedule."""
    if cfg.schedule == "constant":
        return cfg.eta
    total = max(cfg.steps, 1)
    warm = int(cfg.warmup_ratio * total)
    if warm > 0 and t < warm:
        return cfg.eta * (t + 1) / warm
    span = max(total - warm, 1)
    return cfg.eta * 0.5 * (1.0 + math.cos(math.pi * (t - warm) / span))


@dataclass
class AltLoraState:
    """Per-layer optimizer state; every buffer is factor-shaped.

    ma (r x d) and mb (k x r) are first moments kept aligned to the current
    opposite-factor subspace; prev_b / prev_a snapshot the opposite factor
    each moment was last aligned against. va / vb are elementwise second
    moments (AltLoRA+ and Adam baselines only). t counts steps, tau_a/tau_b
    count per-factor updates (bias correction).
    """

    ma: np.ndarray
    mb: np.ndarray
    prev_a: np.ndarray
    prev_b: np.ndarray
    va: np.ndarray | None = None
    vb: np.ndarray | None = None
    t: int = 0
    tau_a: int = 0
    tau_b: int = 0

    @classmethod
    def init(cls, layer: LoraLayer, second_moment: bool = False) -> "AltLoraState":
        r, d, k = layer.r, layer.d, layer.k
        return cls(
            ma=np.zeros((r, d)),
            mb=np.zeros((k, r)),
            prev_a=layer.a.copy(),
            prev_b=layer.b.copy(),
            va=np.zeros((r, d)) if second_moment else None,
            vb=np.zeros((k, r)) if second_moment else None,
        )

    def copy(self) -> "AltLoraState":
        return AltLoraState(
            ma=self.ma.copy(),
            mb=self.mb.copy(),
            prev_a=self.prev_a.copy(),
            prev_b=self.prev_b.copy(),
            va=None if self.va is None else self.va.copy(),
            vb=None if self.vb is None else self.vb.copy(),
            t=self.t,
            tau_a=self.tau_a,
            tau_b=self.tau_b,
        )

    def entry_count(self) -> int:
        total = 0
        for buf in (self.ma, self.mb, self.prev_a, self.prev_b, self.va, self.vb):
            if buf is not None:
                total += buf.size
        return total

    def check_budget(self, layer: LoraLayer) -> None:
        """Assert every buffer is factor-shaped and the total stays low-rank.

        Trips if any code path ever materializes a k x d optimizer buffer.
        """
        k, d, r = layer.k, layer.d, layer.r
        allowed = {(r, d), (k, r)}
        for buf in (self.ma, self.mb, self.prev_a, self.prev_b, self.va, self.vb):
            if buf is not None and buf.shape not in allowed:
                raise AssertionError(f"optimizer buffer has non-factor shape {buf.shape}")
        bound = 6 * (k * r + r * d)
        if self.entry_count() > bound:
            raise AssertionError(f"state holds {self.entry_count()} entries > 6(kr+rd) = {bound}")


# ---------------------------------------------------------------------------
# Scaled gradients and momentum alignment (the closed forms under test)


def scaled_grad_a(grad_a: np.ndarray, b: np.ndarray, s: float, lam: float) -> np.ndarray:
    """Preconditioned A-gradient: (1/s^2) (B^T B + lam I)^-1 grad_a."""
    return damped_gram_inverse(b, "left", lam) @ grad_a / (s * s)


def scaled_grad_b(grad_b: np.ndarray, a: np.ndarray, s: float, lam: float) -> np.ndarray:
    """Preconditioned B-gradient: (1/s^2) grad_b (A A^T + lam I)^-1.

    In the alternating scheme the A passed here is the already-updated
    factor, with the gradient re-evaluated at the half-step weight.
    """
    return grad_b @ damped_gram_inverse(a, "right", lam) / (s * s)


def align_momentum_b(mb: np.ndarray, a_old: np.ndarray, a_new: np.ndarray, lam: float) -> np.ndarray:
    """Carry the B-moment from the a_old row space onto a_new's.

    Least-squares re-expression: mb a_old a_new^T (a_new a_new^T + lam I)^-1,
    the minimizer of || mb a_old - z a_new ||_F.
    """
    return mb @ a_old @ a_new.T @ damped_gram_inverse(a_new, "right", lam)


def align_momentum_a(ma: np.ndarray, b_old: np.ndarray, b_new: np.ndarray, lam: float) -> np.ndarray:
    """Mirror of align_momentum_b: (Bn^T Bn + lam I)^-1 Bn^T Bo ma."""
    return damped_gram_inverse(b_new, "left", lam) @ b_new.T @ b_old @ ma


def update_phase(t: int, order: str) -> str:
    """Which factor moves at step t: "a" or "b"."""
    if order == A_FIRST:
        return "a" if t % 2 == 0 else "b"
    if order == B_FIRST:
        return "b" if t % 2 == 0 else "a"
    raise ValueError(f"alternating steppers need order a_first or b_first, got {order!r}")


def _gradient_array(g) -> np.ndarray:
    return g.g if isinstance(g, FullGradient) else np.asarray(g, dtype=np.float64)


# ---------------------------------------------------------------------------
# Alternating steppers


def altlora_step(layer: LoraLayer, state: AltLoraState, g, cfg: TrainConfig):
    """One alternating step with first-moment momentum.

    Updates exactly one factor (phase set by t and cfg.order): the raw
    factor gradient is Gram-preconditioned, the stored moment is realigned
    against the current opposite factor, mixed with beta1, and applied with
    decoupled weight decay. The opposite-factor snapshot is then refreshed.
    """
    gm = _gradient_array(g)
    phase = update_phase(state.t, cfg.order)
    grad_a, grad_b = lora_grads(gm, layer)
    if phase == "a":
        tilde = scaled_grad_a(grad_a, layer.b, layer.s, cfg.lam)
        if cfg.beta1 != 0.0:
            aligned = align_momentum_a(state.ma, state.prev_b, layer.b, cfg.lam)
            state.ma = cfg.beta1 * aligned + (1.0 - cfg.beta1) * tilde
        else:
            state.ma = tilde
        layer.a = layer.a - cfg.eta * (state.ma + cfg.gamma * layer.a)
        state.prev_b = layer.b.copy()
        state.tau_a += 1
    else:
        tilde = scaled_grad_b(grad_b, layer.a, layer.s, cfg.lam)
        if cfg.beta1 != 0.0:
            aligned = align_momentum_b(state.mb, state.prev_a, layer.a, cfg.lam)
            state.mb = cfg.beta1 * aligned + (1.0 - cfg.beta1) * tilde
        else:
            state.mb = tilde
        layer.b = layer.b - cfg.eta * (state.mb + cfg.gamma * layer.b)
        state.prev_a = layer.a.copy()
        state.tau_b += 1
    state.t += 1
    state.check_budget(layer)
    return layer, state


def altlora_plus_step(layer: LoraLayer, state: AltLoraState, g, cfg: TrainConfig):
    """Alternating step with AdamW-style elementwise second moments.

    First moments are realigned exactly as in altlora_step; second moments
    are plain elementwise EMAs of the squared scaled gradient and are NOT
    subspace-realigned, which is why this variant gives up transformation
    invariance. Bias correction (per-factor update counts) is on by default
    behind cfg.bias_correction.
    """
    gm = _gradient_array(g)
    if state.va is None or state.vb is None:
        raise ValueError("altlora_plus_step needs a state built with second_moment=True")
    phase = update_phase(state.t, cfg.order)
    grad_a, grad_b = lora_grads(gm, layer)
    if phase == "a":
        tilde = scaled_grad_a(grad_a, layer.b, layer.s, cfg.lam)
        if cfg.beta1 != 0.0:
            aligned = align_momentum_a(state.ma, state.prev_b, layer.b, cfg.lam)
            state.ma = cfg.beta1 * aligned + (1.0 - cfg.beta1) * tilde
        else:
            state.ma = tilde
        state.va = cfg.beta2 * state.va + (1.0 - cfg.beta2) * (tilde * tilde)
        state.tau_a += 1
        m_hat, v_hat = state.ma, state.va
        if cfg.bias_correction:
            m_hat = m_hat / (1.0 - cfg.beta1 ** state.tau_a)
            v_hat = v_hat / (1.0 - cfg.beta2 ** state.tau_a)
        direction = m_hat / (np.sqrt(v_hat) + cfg.eps)
        layer.a = layer.a - cfg.eta * (direction + cfg.gamma * layer.a)
        state.prev_b = layer.b.copy()
    else:
        tilde = scaled_grad_b(grad_b, layer.a, layer.s, cfg.lam)
        if cfg.beta1 != 0.0:
            aligned = align_momentum_b(state.mb, state.prev_a, layer.a, cfg.lam)
            state.mb = cfg.beta1 * aligned + (1.0 - cfg.beta1) * tilde
        else:
            state.mb = tilde
        state.vb = cfg.beta2 * state.vb + (1.0 - cfg.beta2) * (tilde * tilde)
        state.tau_b += 1
        m_hat, v_hat = state.mb, state.vb
        if cfg.bias_correction:
            m_hat = m_hat / (1.0 - cfg.beta1 ** state.tau_b)
            v_hat = v_hat / (1.0 - cfg.beta2 ** state.tau_b)
        direction = m_hat / (np.sqrt(v_hat) + cfg.eps)
        layer.b = layer.b - cfg.eta * (direction + cfg.gamma * layer.b)
        state.prev_a = layer.a.copy()
    state.t += 1
    state.check_budget(layer)
    return layer, state


# ---------------------------------------------------------------------------
# Baselines


def baseline_step(kind: str, layer: LoraLayer, state: AltLoraState, g, cfg: TrainConfig):
    """One joint step of a baseline optimizer (both factors move at once)."""
    gm = _gradient_array(g)
    grad_a, grad_b = lora_grads(gm, layer)
    if kind == LORA_SGD:
        layer.a = layer.a - cfg.eta * (grad_a + cfg.gamma * layer.a)
        layer.b = layer.b - cfg.eta * (grad_b + cfg.gamma * layer.b)
    elif kind == LORA_PLUS:
        eta_b = cfg.lora_plus_ratio * cfg.eta
        layer.a = layer.a - cfg.eta * (grad_a + cfg.gamma * layer.a)
        layer.b = layer.b - eta_b * (grad_b + cfg.gamma * layer.b)
    elif kind == LORA_ADAM:
        if state.va is None or state.vb is None:
            raise ValueError("lora_adam needs a state built with second_moment=True")
        tau = state.t + 1
        state.ma = cfg.beta1 * state.ma + (1.0 - cfg.beta1) * grad_a
        state.va = cfg.beta2 * state.va + (1.0 - cfg.beta2) * (grad_a * grad_a)
        state.mb = cfg.beta1 * state.mb + (1.0 - cfg.beta1) * grad_b
        state.vb = cfg.beta2 * state.vb + (1.0 - cfg.beta2) * (grad_b * grad_b)
        ma_hat, va_hat = state.ma, state.va
        mb_hat, vb_hat = state.mb, state.vb
        if cfg.bias_correction:
            c1 = 1.0 - cfg.beta1**tau
            c2 = 1.0 - cfg.beta2**tau
            ma_hat, va_hat = ma_hat / c1, va_hat / c2
            mb_hat, vb_hat = mb_hat / c1, vb_hat / c2
        layer.a = layer.a - cfg.eta * (ma_hat / (np.sqrt(va_hat) + cfg.eps) + cfg.gamma * layer.a)
        layer.b = layer.b - cfg.eta * (mb_hat / (np.sqrt(vb_hat) + cfg.eps) + cfg.gamma * layer.b)
        state.tau_a += 1
        state.tau_b += 1
    elif kind == SCALEDGD_JOINT:
        # Both scaled gradients from the same G at the same point; this is
        # the stepper whose merged-weight update carries the eta^2 cross
        # term that the alternating scheme avoids. Momentum, when enabled,
        # is a plain EMA on the scaled gradients (no realignment).
        tilde_a = scaled_grad_a(grad_a, layer.b, layer.s, cfg.lam)
        tilde_b = scaled_grad_b(grad_b, layer.a, layer.s, cfg.lam)
        if cfg.beta1 != 0.0:
            state.ma = cfg.beta1 * state.ma + (1.0 - cfg.beta1) * tilde_a
            state.mb = cfg.beta1 * state.mb + (1.0 - cfg.beta1) * tilde_b
        else:
            state.ma, state.mb = tilde_a, tilde_b
        layer.a = layer.a - cfg.eta * (state.ma + cfg.gamma * layer.a)
        layer.b = layer.b - cfg.eta * (state.mb + cfg.gamma * layer.b)
        state.tau_a += 1
        state.tau_b += 1
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    state.t += 1
    state.check_budget(layer)
    return layer, state


def make_state(kind: str, layer: LoraLayer) -> AltLoraState:
    """State record sized for the given optimizer kind."""
    needs_second = kind in (ALTLORA_PLUS, LORA_ADAM)
    return AltLoraState.init(layer, second_moment=needs_second)


def make_stepper(kind: str):
    """Uniform stepping callable (layer, state, g, cfg) for any optimizer."""
    if kind == ALTLORA:
        return altlora_step
    if kind == ALTLORA_PLUS:
        return altlora_plus_step
    if kind in BASELINES:
        def step(layer, state, g, cfg, _kind=kind):
            return baseline_step(_kind, layer, state, g, cfg)

        return step
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# Reference: the joint-update equivalent gradient with an ancillary matrix


def lorapro_equiv_grad(g, layer: LoraLayer, x_aux: np.ndarray, lam: float):
    """Joint-update gradient pair parameterized by an ancillary r x r matrix.

        g_a = (1/s) (B^T B + lam I)^-1 B^T G + X A
        g_b = (1/s) [I - B (B^T B + lam I)^-1 B^T] G A^T (A A^T + lam I)^-1 - B X

    The induced merged-weight change s B g_a + s g_b A is independent of X:
    the ancillary matrix only redistributes the update between the factors.
    """
    gm = _gradient_array(g)
    a, b, s = layer.a, layer.b, layer.s
    binv = damped_gram_inverse(b, "left", lam)
    ainv = damped_gram_inverse(a, "right", lam)
    bt_g = b.T @ gm
    g_a = binv @ bt_g / s + x_aux @ a
    g_b = (gm - b @ (binv @ bt_g)) @ a.T @ ainv / s - b @ x_aux
    return g_a, g_b


def equivalent_gradient(g_a: np.ndarray, g_b: np.ndarray, layer: LoraLayer) -> np.ndarray:
    """Merged-weight change rate induced by a factor gradient pair."""
    return layer.s * (layer.b @ g_a) + layer.s * (g_b @ layer.a)
