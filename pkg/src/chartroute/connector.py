"""Mixture-of-experts vision-language connector.

Each visual token is scored by a linear gate, the softmax probabilities are
masked to the top-K experts, and the token's output is the weighted sum of
the kept experts' two-layer MLP outputs.  Forward passes return a cache that
the matching ``*_backward`` function consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkit import (
    DimensionError,
    affine,
    affine_backward,
    gelu,
    gelu_grad,
    logsumexp_rows,
    softmax_rows,
    softmax_rows_backward,
)

CHECKPOINT_VERSION = 1
CANONICAL_LABELS = ("vanilla", "table", "json", "code")

# bz-loss coefficients (balance, router z-loss)
BALANCE_COEF = 0.01
Z_COEF = 0.001


class ConfigError(ValueError):
    """Invalid connector or routing configuration."""


class UsageError(ValueError):
    """Operation called with unusable input (e.g. empty)."""


@dataclass
class ExpertMLP:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d_in, d_h = self.W1.shape
        if self.b1.shape != (d_h,) or self.W2.shape[0] != d_h or self.b2.shape != (self.W2.shape[1],):
            raise DimensionError("inconsistent expert shapes")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    @classmethod
    def init(cls, d_in: int, d_h: int, d_out: int, rng: np.random.Generator) -> ExpertMLP:
        """Fan-in scaled normal weights, zero biases."""
        return cls(
            rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_h)),
            np.zeros(d_h),
            rng.normal(0.0, 1.0 / math.sqrt(d_h), (d_h, d_out)),
            np.zeros(d_out),
        )

    @classmethod
    def zeros(cls, d_in: int, d_h: int, d_out: int) -> ExpertMLP:
        return cls(np.zeros((d_in, d_h)), np.zeros(d_h), np.zeros((d_h, d_out)), np.zeros(d_out))

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}W1": self.W1, f"{prefix}b1": self.b1, f"{prefix}W2": self.W2, f"{prefix}b2": self.b2}

    def copy(self) -> ExpertMLP:
        return ExpertMLP(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def equals(self, other: ExpertMLP) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values()))


def expert_forward(e: ExpertMLP, V: np.ndarray):
    """affine -> gelu -> affine.  Returns ``(out, cache)``."""
    if V.shape[-1] != e.W1.shape[0]:
        raise DimensionError(f"tokens {V.shape} vs expert input {e.W1.shape[0]}")
    pre = affine(V, e.W1, e.b1)
    hid = gelu(pre)
    out = affine(hid, e.W2, e.b2)
    return out, (V, pre, hid)


def expert_backward(e: ExpertMLP, cache, dout: np.ndarray):
    """Returns ``(dV, grads)`` with grads keyed W1, b1, W2, b2."""
    V, pre, hid = cache
    dhid, dW2, db2 = affine_backward(hid, e.W2, dout)
    dpre = dhid * gelu_grad(pre)
    dV, dW1, db1 = affine_backward(V, e.W1, dpre)
    return dV, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


@dataclass
class GateNet:
    Wg: np.ndarray
    bg: np.ndarray

    @classmethod
    def zeros(cls, d_in: int, n_experts: int) -> GateNet:
        if n_experts < 1:
            raise ConfigError("gate needs at least one expert")
        return cls(np.zeros((d_in, n_experts)), np.zeros(n_experts))

    def copy(self) -> GateNet:
        return GateNet(self.Wg.copy(), self.bg.copy())


@dataclass
class RoutingTrace:
    logits: np.ndarray
    probs: np.ndarray
    kept_indices: np.ndarray  # (N, K) expert ids, highest probability first
    weights: np.ndarray  # (N, L), zero outside kept


@dataclass
class MoEConnector:
    experts: list[ExpertMLP]
    gate: GateNet
    K: int = 2
    renormalize: bool = True
    expert_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        L = len(self.experts)
        if L < 1:
            raise ConfigError("connector needs at least one expert")
        if not 1 <= self.K <= L:
            raise ConfigError(f"K={self.K} outside [1, {L}]")
        dims = self.experts[0].dims
        if any(e.dims != dims for e in self.experts):
            raise ConfigError("all experts must share shapes")
        if self.gate.Wg.shape != (dims[0], L) or self.gate.bg.shape != (L,):
            raise ConfigError("gate shape does not match experts")
        if not self.expert_labels:
            self.expert_labels = [f"E{j}" for j in range(L)]
        if len(self.expert_labels) != L:
            raise ConfigError("one label per expert required")

    @property
    def L(self) -> int:
        return len(self.experts)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.experts[0].dims

    def params(self) -> dict[str, np.ndarray]:
        out = {"gate.Wg": self.gate.Wg, "gate.bg": self.gate.bg}
        for j, e in enumerate(self.experts):
            out.update(e.params(f"experts.{j}."))
        return out

    def copy(self) -> MoEConnector:
        return MoEConnector(
            [e.copy() for e in self.experts], self.gate.copy(), self.K, self.renormalize, list(self.expert_labels)
        )


def top_k_mask(probs: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean keep-mask and (N, K) kept ids; ties go to the lower index."""
    N, L = probs.shape
    if not 1 <= K <= L:
        raise ConfigError(f"K={K} outside [1, {L}]")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :K]
    mask = np.zeros_like(probs, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask, order


def route_top_k(prob_row: Sequence[float], K: int, renormalize: bool = True) -> np.ndarray:
    """Zero all but the K largest entries of one probability row."""
    p = np.asarray(prob_row, dtype=np.float64).reshape(1, -1)
    mask, _ = top_k_mask(p, K)
    w = np.where(mask, p, 0.0)
    if renormalize:
        w = w / w.sum(axis=1, keepdims=True)
    return w[0]


def moe_forward(c: MoEConnector, V: np.ndarray):
    """Returns ``(out, trace, cache)``; ``cache`` feeds :func:`moe_backward`."""
    d_in = c.dims[0]
    if V.ndim != 2 or V.shape[1] != d_in:
        raise DimensionError(f"tokens {V.shape} vs connector input {d_in}")
    logits = affine(V, c.gate.Wg, c.gate.bg)
    probs = softmax_rows(logits)
    mask, kept = top_k_mask(probs, c.K)
    q = np.where(mask, probs, 0.0)
    denom = q.sum(axis=1, keepdims=True) if c.renormalize else None
    weights = q / denom if c.renormalize else q

    out = np.zeros((V.shape[0], c.dims[2]))
    expert_outs, expert_caches = [], []
    # accumulate in kept-slot order so the sum is invariant to expert relabeling
    for j, e in enumerate(c.experts):
        rows = np.flatnonzero(mask[:, j])
        if rows.size == 0:
            expert_outs.append(None)
            expert_caches.append(None)
            continue
        y, cache = expert_forward(e, V[rows])
        expert_outs.append(y)
        expert_caches.append((rows, cache))
    for slot in range(c.K):
        ids = kept[:, slot]
        for j in range(c.L):
            sel = np.flatnonzero(ids == j)
            if sel.size == 0:
                continue
            rows, _ = expert_caches[j]
            pos = np.searchsorted(rows, sel)
            out[sel] += weights[sel, j, None] * expert_outs[j][pos]
    trace = RoutingTrace(logits, probs, kept, weights)
    return out, trace, (V, mask, denom, expert_outs, expert_caches)


def moe_backward(c: MoEConnector, trace: RoutingTrace, cache, dout: np.ndarray, dprobs_extra=None, dlogits_extra=None):
    """Gradients for gate and experts given ``dout`` (N, D_out).

    ``dprobs_extra`` / ``dlogits_extra`` let auxiliary losses add their own
    gradient w.r.t. the softmax probabilities or the raw logits.  The top-K
    selection itself is treated as a constant mask.
    """
    V, mask, denom, expert_outs, expert_caches = cache
    N, L = trace.probs.shape
    grads: dict[str, np.ndarray] = {}
    dV = np.zeros_like(V)
    dw = np.zeros((N, L))
    for j, e in enumerate(c.experts):
        if expert_caches[j] is None:
            for k, p in e.params(f"experts.{j}.").items():
                grads[k] = np.zeros_like(p)
            continue
        rows, ecache = expert_caches[j]
        y = expert_outs[j]
        dw[rows, j] = np.einsum("nd,nd->n", dout[rows], y)
        dVj, g = expert_backward(e, ecache, trace.weights[rows, j, None] * dout[rows])
        dV[rows] += dVj
        for k, v in g.items():
            grads[f"experts.{j}.{k}"] = v
    if c.renormalize:
        w = trace.weights
        dq = (dw - (dw * w).sum(axis=1, keepdims=True)) / denom
    else:
        dq = dw
    dprobs = np.where(mask, dq, 0.0)
    if dprobs_extra is not None:
        dprobs = dprobs + dprobs_extra
    dlogits = softmax_rows_backward(trace.probs, dprobs)
    if dlogits_extra is not None:
        dlogits = dlogits + dlogits_extra
    dVg, dWg, dbg = affine_backward(V, c.gate.Wg, dlogits)
    grads["gate.Wg"] = dWg
    grads["gate.bg"] = dbg
    return dV + dVg, grads


# --------------------------------------------------------------------------
# auxiliary losses and routing statistics


def aux_losses(trace: RoutingTrace) -> tuple[float, float]:
    """``(balance_loss, z_loss)`` for one routing trace.

    balance = L * sum_j f_j * P_j, with f_j the share of kept (token, slot)
    assignments sent to expert j and P_j the mean routing probability.
    z = mean over tokens of logsumexp(logits)^2.
    """
    N, L = trace.probs.shape
    f = np.bincount(trace.kept_indices.ravel(), minlength=L) / trace.kept_indices.size
    P = trace.probs.mean(axis=0)
    balance = float(L * np.dot(f, P))
    lse = logsumexp_rows(trace.logits)
    return balance, float(np.mean(lse * lse))


def aux_loss_grads(trace: RoutingTrace, balance_coef: float = BALANCE_COEF, z_coef: float = Z_COEF):
    """Weighted aux loss value plus its gradient w.r.t. probabilities and logits."""
    N, L = trace.probs.shape
    f = np.bincount(trace.kept_indices.ravel(), minlength=L) / trace.kept_indices.size
    balance, z = aux_losses(trace)
    dprobs = np.broadcast_to(balance_coef * L * f / N, (N, L)).copy()
    lse = logsumexp_rows(trace.logits)
    dlogits = z_coef * (2.0 * lse / N)[:, None] * trace.probs
    return balance_coef * balance + z_coef * z, dprobs, dlogits


@dataclass
class UsageStats:
    counts: np.ndarray
    shares: np.ndarray
    chi_square: float


def usage_stats(traces: Sequence[RoutingTrace]) -> UsageStats:
    """Per-expert share of kept assignments and chi-square distance from uniform.

    The distance is ``sum_j (share_j - 1/L)^2 / (1/L)``.
    """
    traces = list(traces)
    if not traces or all(t.kept_indices.size == 0 for t in traces):
        raise UsageError("usage_stats needs at least one routed token")
    L = traces[0].probs.shape[1]
    counts = np.zeros(L, dtype=np.int64)
    for t in traces:
        counts += np.bincount(t.kept_indices.ravel(), minlength=L)
    shares = counts / counts.sum()
    chi = float(np.sum((shares - 1.0 / L) ** 2) * L)
    return UsageStats(counts, shares, chi)


@dataclass
class ParamCount:
    expert: int
    gate: int
    total: int
    n_experts: int


def param_count(c: MoEConnector) -> ParamCount:
    d_in, d_h, d_out = c.dims
    L = c.L
    expert = d_in * d_h + d_h + d_h * d_out + d_out
    gate = d_in * L + L
    return ParamCount(expert, gate, L * expert + gate, L)


def top1_experts(c: MoEConnector, V: np.ndarray) -> np.ndarray:
    """Per-token argmax expert (lower index wins ties)."""
    probs = softmax_rows(affine(V, c.gate.Wg, c.gate.bg))
    return np.argsort(-probs, axis=1, kind="stable")[:, 0]


# --------------------------------------------------------------------------
# checkpoints


def _mat(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _unmat(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def expert_to_dict(e: ExpertMLP) -> dict:
    return {k: _mat(v) for k, v in e.params().items()}


def expert_from_dict(d: dict) -> ExpertMLP:
    return ExpertMLP(*(_unmat(d[k]) for k in ("W1", "b1", "W2", "b2")))


def connector_to_dict(c: MoEConnector) -> dict:
    d_in, d_h, d_out = c.dims
    return {
        "version": CHECKPOINT_VERSION,
        "kind": "moe_connector",
        "dims": {"d_in": d_in, "d_h": d_h, "d_out": d_out},
        "L": c.L,
        "K": c.K,
        "renormalize": c.renormalize,
        "labels": list(c.expert_labels),
        "gate": {"Wg": _mat(c.gate.Wg), "bg": _mat(c.gate.bg)},
        "experts": [expert_to_dict(e) for e in c.experts],
    }


def connector_from_dict(d: dict) -> MoEConnector:
    if d.get("version") != CHECKPOINT_VERSION or d.get("kind") != "moe_connector":
        raise ConfigError("not a connector checkpoint of a supported version")
    experts = [expert_from_dict(e) for e in d["experts"]]
    gate = GateNet(_unmat(d["gate"]["Wg"]), _unmat(d["gate"]["bg"]))
    c = MoEConnector(experts, gate, int(d["K"]), bool(d["renormalize"]), list(d["labels"]))
    if c.L != d["L"] or c.dims != tuple(d["dims"][k] for k in ("d_in", "d_h", "d_out")):
        raise ConfigError("checkpoint header does not match weights")
    return c


def save_connector(c: MoEConnector, path: str | Path) -> None:
    Path(path).write_text(json.dumps(connector_to_dict(c)), encoding="utf-8")


def load_connector(path: str | Path) -> MoEConnector:
    return connector_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
