"""Dense float64 kernels with explicit backward passes.

Every trainable component in the package is composed from the handful of
operations here.  A "matrix" is simply a 2-D ``numpy.ndarray`` of dtype
float64; row vectors (biases) are 1-D arrays broadcast over rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
GRAD_CLIP = 1.0

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A loss or parameter became non-finite."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} x {b.shape}")
    return a @ b


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias {b.shape} vs weight {w.shape}")
    return x @ w + b


def affine_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dw, db)`` for ``y = x @ w + b``."""
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU."""
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of :func:`gelu`."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given probabilities ``p`` and upstream ``dp``."""
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    worst_param: str
    passed: bool
    checked: int = 0


# Entries whose true gradient is below this magnitude are judged against it
# instead of their own size, so round-off on near-zero entries cannot dominate.
REL_ERR_FLOOR = 1e-5

LossFn = Callable[[], "tuple[float, Mapping[str, np.ndarray]]"]


def grad_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must return ``(loss, grads)`` evaluated at the current
    contents of the arrays in ``params``; it is called repeatedly while single
    entries are perturbed in place (and restored).  A name missing from
    ``grads`` means the analytic gradient is zero.  The step for an entry with
    value ``p`` is ``h * max(1, |p|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    loss0, grads = loss_fn()
    if not math.isfinite(loss0):
        raise NumericError(f"non-finite loss {loss0}")
    grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}

    worst_rel, worst_abs, worst_name, checked = 0.0, 0.0, "", 0
    for name, arr in params.items():
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(arr)
        if analytic.shape != arr.shape:
            raise DimensionError(f"gradient for {name}: {analytic.shape} vs {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name} must be contiguous to perturb in place")
        an = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp, _ = loss_fn()
            hi = flat[i]
            flat[i] = orig - step
            fm, _ = loss_fn()
            lo = flat[i]
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (fp - fm) / (hi - lo)
            abs_err = abs(num - an[i])
            rel_err = abs_err / max(abs(num), abs(an[i]), REL_ERR_FLOOR)
            checked += 1
            if rel_err > worst_rel:
                worst_rel, worst_name = rel_err, f"{name}[{i}]"
            worst_abs = max(worst_abs, abs_err)
    passed = worst_rel <= rel_tol or worst_abs <= abs_tol
    return GradCheckReport(worst_rel, worst_abs, worst_name, passed, checked)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.1,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
    clip: float | None = GRAD_CLIP,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update; returns new parameter arrays and a new state.

    Gradients are clipped by global L2 norm before the moment update.  Weight
    decay is decoupled: ``p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    Parameters without a gradient entry are treated as having zero gradient.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    b1, b2 = betas
    grads = {k: np.asarray(grads[k]) if k in grads else np.zeros_like(p) for k, p in params.items()}
    if clip is not None:
        grads, _ = clip_by_global_norm(grads, clip)
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k}: {g.shape} vs {p.shape}")
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p * (1.0 - lr * weight_decay) - lr * (m_hat / (np.sqrt(v_hat) + eps))
        new_m[k] = np.broadcast_to(m, p.shape).copy()
        new_v[k] = np.broadcast_to(v, p.shape).copy()
    return new_p, AdamWState(t, new_m, new_v)


def cosine_lr(step: int, total: int, peak: float, warmup_ratio: float = 0.01) -> float:
    """Linear warm-up from exactly 0, then cosine decay to 0 at ``total``.

    Warm-up lasts ``max(1, ceil(warmup_ratio * total))`` steps.
    """
    if total <= 0:
        return 0.0
    warm = max(1, math.ceil(warmup_ratio * total))
    if step < warm:
        return peak * step / warm
    span = max(1, total - 1 - warm)
    frac = min(1.0, (step - warm) / span) if total - 1 > warm else 1.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
