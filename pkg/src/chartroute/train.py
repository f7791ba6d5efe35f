"""Alignment pre-training, expert initialization, two-phase SFT, and ablation drivers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chartsynth import ALIGN_KINDS, make_quadruple
from .connector import (
    CANONICAL_LABELS,
    ConfigError,
    ExpertMLP,
    GateNet,
    MoEConnector,
    UsageError,
    aux_loss_grads,
    expert_backward,
    expert_forward,
    moe_backward,
    moe_forward,
    usage_stats,
)
from .evalkit import QAItem, score_report
from .numkit import AdamWState, NumericError, adamw_step, cosine_lr, mse_loss
from .toystack import DecoderHead, PatchEncoder, TextEmbedder, decode_backward, decode_with_lora, embed_text, encode_chart

D_IN, D_H, D_OUT = 32, 64, 48
N_EXPERTS, TOP_K = 4, 2
BATCH = 16
WEIGHT_DECAY = 0.1
WARMUP = 0.01
SFT_LR = (5e-5, 1e-5)
SFT_EPOCHS = (30, 10)
ALIGN_LR = 5e-5
ALIGN_EPOCHS = 30
ALIGN_SIZES = {"table": 500, "json": 200, "code": 100}
N_ANSWER = 3  # [max, min, series count]
MAX_SERIES = 4

# fixture seed blocks; disjoint so no chart is shared between splits
ALIGN_BASE, GENERAL_BASE, SFT_BASE, ANNEAL_BASE, EVAL_BASE = 100_000, 200_000, 300_000, 400_000, 500_000
GENERAL_SIZE, SFT_SIZE, ANNEAL_SIZE, EVAL_SIZE = 300, 800, 200, 200

STRATEGIES = ("random", "co_upcycle", "diverse")


# --------------------------------------------------------------------------
# frozen stack and fixture data


@dataclass(frozen=True)
class ToyStack:
    encoder: PatchEncoder
    embedder: TextEmbedder
    head: DecoderHead  # frozen W plus the step-0 LoRA factors

    @classmethod
    def build(cls, seed: int = 0, d_in: int = D_IN, d_out: int = D_OUT) -> ToyStack:
        return cls(PatchEncoder.build(d_in, seed=seed), TextEmbedder.build(seed=seed), DecoderHead.build(d_out, seed=seed))


@lru_cache(maxsize=4)
def default_stack(seed: int = 0) -> ToyStack:
    return ToyStack.build(seed)


@dataclass
class ChartRecord:
    seed: int
    tokens: np.ndarray
    targets: dict[str, str]  # alignment kind -> target text
    answer: np.ndarray  # normalized [max, min, series count]
    scale: float


def qa_answer(table) -> tuple[np.ndarray, float]:
    _, scale = table.value_range
    flat = [v for row in table.values for v in row]
    return np.array([max(flat) / scale, min(flat) / scale, table.n_series / MAX_SERIES]), scale


@lru_cache(maxsize=None)
def chart_record(seed: int, stack_seed: int = 0) -> ChartRecord:
    q = make_quadruple(seed)
    ans, scale = qa_answer(q.table)
    targets = {"table": q.table.to_csv(), "json": q.spec.to_json(), "code": q.code.text}
    tokens = encode_chart(default_stack(stack_seed).encoder, q.raster)
    tokens.setflags(write=False)
    return ChartRecord(seed, tokens, targets, ans, scale)


def chart_records(base_seed: int, n: int, stack_seed: int = 0) -> tuple[ChartRecord, ...]:
    return tuple(chart_record(s, stack_seed) for s in range(base_seed, base_seed + n))


_GENERAL_COLORS = {"red": (220, 60, 50), "green": (60, 170, 80), "blue": (50, 90, 210), "gray": (128, 128, 128), "gold": (230, 180, 40)}


def general_image(seed: int) -> tuple[np.ndarray, str]:
    """A non-chart raster (gradient, noise or blobs) with a caption stub."""
    rng = np.random.default_rng([seed, 0x6E9])
    kind = ("gradient", "noise", "blobs")[int(rng.integers(3))]
    cname = sorted(_GENERAL_COLORS)[int(rng.integers(len(_GENERAL_COLORS)))]
    color = np.array(_GENERAL_COLORS[cname], dtype=np.float64)
    size = 490
    if kind == "gradient":
        t = np.linspace(0.0, 1.0, size)
        ramp = t[None, :, None] if rng.integers(2) else t[:, None, None]
        img = 255.0 * (1 - ramp) + color * ramp
        img = np.broadcast_to(img, (size, size, 3))
    elif kind == "noise":
        img = color + rng.normal(0.0, 40.0, (size, size, 3))
    else:
        img = np.full((size, size, 3), 255.0)
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(2, 6))):
            cy, cx, r = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(30, 120)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = color
    caption = f"a {kind} picture in {cname} tones"
    return np.clip(img, 0, 255).astype(np.uint8), caption


@lru_cache(maxsize=4)
def general_records(base_seed: int, n: int, stack_seed: int = 0) -> tuple[tuple[np.ndarray, str], ...]:
    enc = default_stack(stack_seed).encoder
    out = []
    for s in range(base_seed, base_seed + n):
        img, cap = general_image(s)
        out.append((encode_chart(enc, img), cap))
    return tuple(out)


# --------------------------------------------------------------------------
# alignment


@dataclass
class AlignTask:
    """Chart-to-text pairs; charts are carried as their frozen-encoder tokens."""

    kind: str
    pairs: list[tuple[np.ndarray, str]]

    def __post_init__(self):
        if self.kind not in (*ALIGN_KINDS, "general"):
            raise ConfigError(f"unknown alignment kind {self.kind!r}")


def fixture_align_task(kind: str, n: int | None = None) -> AlignTask:
    n = ALIGN_SIZES[kind] if n is None else n
    recs = chart_records(ALIGN_BASE, n)
    return AlignTask(kind, [(r.tokens, r.targets[kind]) for r in recs])


def fixture_general_task(n: int = GENERAL_SIZE) -> AlignTask:
    return AlignTask("general", list(general_records(GENERAL_BASE, n)))


@dataclass
class TrainLog:
    seed: int
    records: list[dict] = field(default_factory=list)
    usage: list[dict] = field(default_factory=list)
    schedule: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _batches(n: int, rng: np.random.Generator, batch: int):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


def _align_loss(e: ExpertMLP, W: np.ndarray, X: np.ndarray, T: np.ndarray):
    B, N, d = X.shape
    y, cache = expert_forward(e, X.reshape(B * N, d))
    pooled = y.reshape(B, N, -1).mean(axis=1)
    loss, dout = mse_loss(pooled @ W, T)
    dy = np.repeat((dout @ W.T)[:, None, :] / N, N, axis=1).reshape(B * N, -1)
    _, g = expert_backward(e, cache, dy)
    return loss, g


def align_connector(
    task: AlignTask,
    seed: int = 0,
    epochs: int = ALIGN_EPOCHS,
    lr: float = ALIGN_LR,
    stack: ToyStack | None = None,
    batch: int = BATCH,
    log: TrainLog | None = None,
) -> ExpertMLP:
    """Train one fresh two-layer connector toward the frozen text embeddings.

    Only the connector updates: decode through the frozen head weight (no
    adapter) of the mean-pooled connector tokens, MSE against
    ``embed_text(target)``.
    """
    if not task.pairs:
        raise UsageError("alignment task has no pairs")
    stack = stack or default_stack()
    X = np.stack([t for t, _ in task.pairs])
    T = np.stack([embed_text(stack.embedder, s) for _, s in task.pairs])
    rng = np.random.default_rng([seed, 0xA11, ALIGN_KINDS.index(task.kind) if task.kind in ALIGN_KINDS else 9])
    e = ExpertMLP.init(X.shape[2], D_H, stack.head.W.shape[0], rng)
    steps_per_epoch = math.ceil(len(X) / batch)
    total = steps_per_epoch * epochs
    state = AdamWState()
    params = e.params()
    step = 0
    for epoch in range(epochs):
        for idx in _batches(len(X), rng, batch):
            cur_lr = cosine_lr(step, total, lr, WARMUP)
            loss, g = _align_loss(e, stack.head.W, X[idx], T[idx])
            if not math.isfinite(loss):
                raise NumericError(f"alignment loss became {loss}")
            new, state = adamw_step(params, g, state, cur_lr, WEIGHT_DECAY)
            for k in params:
                np.copyto(params[k], new[k])
            if log is not None:
                log.records.append({"step": step, "phase": f"align-{task.kind}", "lr": cur_lr, "loss": loss})
            step += 1
    return e


def align_loss(e: ExpertMLP, task: AlignTask, stack: ToyStack | None = None) -> float:
    stack = stack or default_stack()
    X = np.stack([t for t, _ in task.pairs])
    T = np.stack([embed_text(stack.embedder, s) for _, s in task.pairs])
    return _align_loss(e, stack.head.W, X, T)[0]


def vanilla_connector(seed: int = 0, general_pairs: AlignTask | None = None, epochs: int = ALIGN_EPOCHS, lr: float = ALIGN_LR, stack=None) -> ExpertMLP:
    """The baseline connector: aligned on non-chart images with caption stubs."""
    task = general_pairs if general_pairs is not None else fixture_general_task()
    return align_connector(task, seed, epochs, lr, stack)


# --------------------------------------------------------------------------
# initialization


def init_moe(
    strategy: str,
    aligned: dict[str, ExpertMLP] | None = None,
    vanilla: ExpertMLP | None = None,
    L: int = N_EXPERTS,
    K: int = TOP_K,
    seed: int = 0,
    renormalize: bool = True,
    dims: tuple[int, int, int] | None = None,
) -> MoEConnector:
    """Build a connector with a zero gate and experts initialized per ``strategy``."""
    if strategy == "random":
        if dims is None:
            src = vanilla or next(iter((aligned or {}).values()), None)
            dims = src.dims if src is not None else (D_IN, D_H, D_OUT)
        rng = np.random.default_rng([seed, 0x4A4D])
        experts = [ExpertMLP.init(*dims, rng) for _ in range(L)]
        labels = [f"E{j}" for j in range(L)]
    elif strategy == "co_upcycle":
        if vanilla is None:
            raise ConfigError("co_upcycle needs the vanilla connector")
        experts = [vanilla.copy() for _ in range(L)]
        labels = [f"E{j}" for j in range(L)]
    elif strategy == "diverse":
        if L != 4:
            raise ConfigError("diverse initialization uses exactly 4 experts")
        missing = [k for k in ALIGN_KINDS if k not in (aligned or {})]
        if vanilla is None or missing:
            raise ConfigError(f"diverse init needs vanilla and aligned connectors; missing {missing or ['vanilla']}")
        experts = [vanilla.copy()] + [aligned[k].copy() for k in ALIGN_KINDS]
        labels = list(CANONICAL_LABELS)
    else:
        raise ConfigError(f"unknown init strategy {strategy!r}")
    return MoEConnector(experts, GateNet.zeros(experts[0].dims[0], L), K, renormalize, labels)


# --------------------------------------------------------------------------
# supervised fine-tuning


@dataclass
class QASet:
    tokens: np.ndarray  # (n, N, d_in)
    answers: np.ndarray  # (n, 3)
    scales: np.ndarray  # (n,)

    @classmethod
    def from_records(cls, recs: Sequence[ChartRecord]) -> QASet:
        return cls(np.stack([r.tokens for r in recs]), np.stack([r.answer for r in recs]), np.array([r.scale for r in recs]))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Phase:
    name: str
    lr: float
    epochs: int
    data: QASet


def fixture_phases(sft_size: int = SFT_SIZE, anneal_size: int = ANNEAL_SIZE, epochs=SFT_EPOCHS) -> list[Phase]:
    return [
        Phase("knowledge", SFT_LR[0], epochs[0], QASet.from_records(chart_records(SFT_BASE, sft_size))),
        Phase("anneal", SFT_LR[1], epochs[1], QASet.from_records(chart_records(ANNEAL_BASE, anneal_size))),
    ]


def fixture_eval_set(n: int = EVAL_SIZE) -> QASet:
    return QASet.from_records(chart_records(EVAL_BASE, n))


def _sft_forward(c: MoEConnector, head: DecoderHead, X: np.ndarray):
    B, N, d = X.shape
    y, trace, cache = moe_forward(c, X.reshape(B * N, d))
    pooled = y.reshape(B, N, -1).mean(axis=1)
    out = decode_with_lora(head, pooled)
    return out[:, :N_ANSWER], (pooled, trace, cache, B, N)


def sft_loss_and_grads(c: MoEConnector, head: DecoderHead, X: np.ndarray, Y: np.ndarray, bz_loss: bool = False):
    """Task MSE (+ optional bz-loss) and gradients for gate, experts, LoRA."""
    pred, (pooled, trace, cache, B, N) = _sft_forward(c, head, X)
    loss, dpred = mse_loss(pred, Y)
    dout = np.zeros((B, head.W.shape[1]))
    dout[:, :N_ANSWER] = dpred
    dpooled, grads = decode_backward(head, pooled, dout)
    dy = np.repeat(dpooled[:, None, :] / N, N, axis=1).reshape(B * N, -1)
    extra_p = extra_z = None
    aux = 0.0
    if bz_loss:
        aux, extra_p, extra_z = aux_loss_grads(trace)
    _, g = moe_backward(c, trace, cache, dy, extra_p, extra_z)
    grads.update(g)
    return loss, aux, grads, trace


def predict(c: MoEConnector, head: DecoderHead, data: QASet, batch: int = 64) -> np.ndarray:
    return np.concatenate([_sft_forward(c, head, data.tokens[i : i + batch])[0] for i in range(0, len(data), batch)])


def sft_run(
    c: MoEConnector,
    head: DecoderHead,
    phases: Sequence[Phase],
    bz_loss: bool = False,
    seed: int = 0,
    batch: int = BATCH,
) -> tuple[MoEConnector, DecoderHead, TrainLog]:
    """Train gate, experts and LoRA factors phase by phase on the toy QA task.

    Each phase runs its own cosine schedule with warm-up from lr 0.  Inputs
    are not mutated; trained copies are returned.
    """
    c, head = c.copy(), head.copy()
    log = TrainLog(seed)
    rng = np.random.default_rng([seed, 0x5F7])
    params = {**c.params(), **head.lora_params()}
    step = 0
    for phase in phases:
        steps_per_epoch = math.ceil(len(phase.data) / batch)
        total = steps_per_epoch * phase.epochs
        log.schedule.append({"phase": phase.name, "peak_lr": phase.lr, "steps": total, "epochs": phase.epochs, "warmup_ratio": WARMUP})
        state = AdamWState()
        k = 0
        for epoch in range(phase.epochs):
            traces = []
            for idx in _batches(len(phase.data), rng, batch):
                lr = cosine_lr(k, total, phase.lr, WARMUP)
                loss, aux, grads, trace = sft_loss_and_grads(c, head, phase.data.tokens[idx], phase.data.answers[idx], bz_loss)
                if not (math.isfinite(loss) and math.isfinite(aux)):
                    raise NumericError(f"loss became non-finite at step {step}")
                new, state = adamw_step(params, grads, state, lr, WEIGHT_DECAY)
                for name in params:
                    np.copyto(params[name], new[name])
                rec = {"step": step, "phase": phase.name, "lr": lr, "loss": loss}
                if bz_loss:
                    rec["aux_loss"] = aux
                log.records.append(rec)
                traces.append(trace)
                step += 1
                k += 1
            u = usage_stats(traces)
            log.usage.append({"phase": phase.name, "epoch": epoch, "shares": u.shares.tolist(), "chi_square": u.chi_square})
    return c, head, log


# --------------------------------------------------------------------------
# evaluation and ablations


def qa_items(pred: np.ndarray, data: QASet) -> list[QAItem]:
    items = []
    names = ("max", "min", "series count")
    for i in range(len(data)):
        for k, name in enumerate(names):
            scale = MAX_SERIES if k == 2 else data.scales[i]
            gt = data.answers[i, k] * scale
            items.append(QAItem(f"What is the {name}?", f"{gt:.6g}", f"{pred[i, k] * scale:.6g}", f"{i}:{k}"))
    return items


@dataclass
class EvalResult:
    loss: float
    acc05: float
    usage_chi_square: float
    shares: list[float]


def evaluate(c: MoEConnector, head: DecoderHead, data: QASet) -> EvalResult:
    pred = predict(c, head, data)
    loss, _ = mse_loss(pred, data.answers)
    report = score_report(qa_items(pred, data), margins=(0.05,))
    B, N, d = data.tokens.shape
    _, trace, _ = moe_forward(c, data.tokens.reshape(B * N, d))
    u = usage_stats([trace])
    return EvalResult(loss, report.accuracy[0.05], u.chi_square, u.shares.tolist())


@lru_cache(maxsize=8)
def aligned_experts(seed: int, epochs: int = ALIGN_EPOCHS, lr: float = ALIGN_LR) -> tuple[dict[str, ExpertMLP], ExpertMLP]:
    aligned = {k: align_connector(fixture_align_task(k), seed, epochs, lr) for k in ALIGN_KINDS}
    vanilla = vanilla_connector(seed, epochs=epochs, lr=lr)
    return aligned, vanilla


@dataclass(frozen=True)
class RunSpec:
    strategy: str
    bz_loss: bool = False


@dataclass
class RunResult:
    strategy: str
    bz_loss: bool
    seed: int
    final_loss: float  # mean training loss over the last epoch of the last phase
    acc05: float
    chi_square: float
    shares: list[float]
    eval_loss: float = float("nan")


def final_epoch_loss(log: TrainLog) -> float:
    """Mean training loss over the last epoch of the last phase."""
    if not log.records:
        return float("nan")
    last = log.schedule[-1]
    per_epoch = last["steps"] // max(1, last["epochs"])
    tail = [r["loss"] for r in log.records if r["phase"] == last["phase"]][-per_epoch:]
    return float(np.mean(tail))


def run_one(spec: RunSpec, seed: int, phases: Sequence[Phase] | None = None, eval_set: QASet | None = None) -> RunResult:
    phases = fixture_phases() if phases is None else phases
    eval_set = fixture_eval_set() if eval_set is None else eval_set
    aligned, vanilla = aligned_experts(seed)
    c = init_moe(spec.strategy, aligned, vanilla, seed=seed)
    head = DecoderHead.build(D_OUT, seed=0, lora_seed=seed)
    c, head, log = sft_run(c, head, phases, spec.bz_loss, seed)
    ev = evaluate(c, head, eval_set)
    train_usage = log.usage[-1] if log.usage else {"chi_square": ev.usage_chi_square, "shares": ev.shares}
    return RunResult(
        spec.strategy, spec.bz_loss, seed, final_epoch_loss(log), ev.acc05, train_usage["chi_square"], train_usage["shares"], ev.loss
    )


@dataclass
class AblationSummary:
    results: list[RunResult]

    def by(self, strategy: str, bz_loss: bool = False) -> list[RunResult]:
        return sorted((r for r in self.results if r.strategy == strategy and r.bz_loss == bz_loss), key=lambda r: r.seed)

    def mean(self, strategy: str, attr: str, bz_loss: bool = False) -> float:
        return float(np.mean([getattr(r, attr) for r in self.by(strategy, bz_loss)]))

    def wins(self, a: RunSpec, b: RunSpec, attr: str = "final_loss") -> int:
        """Seeds where ``a`` scores strictly lower than ``b`` on ``attr``."""
        ra, rb = self.by(a.strategy, a.bz_loss), self.by(b.strategy, b.bz_loss)
        return sum(x.__dict__[attr] < y.__dict__[attr] for x, y in zip(ra, rb))

    def table(self) -> list[dict]:
        keys = sorted({(r.strategy, r.bz_loss) for r in self.results})
        return [
            {
                "strategy": s,
                "bz_loss": bz,
                "mean_final_loss": self.mean(s, "final_loss", bz),
                "mean_eval_loss": self.mean(s, "eval_loss", bz),
                "mean_acc05": self.mean(s, "acc05", bz),
                "mean_chi_square": self.mean(s, "chi_square", bz),
                "seeds": [r.seed for r in self.by(s, bz)],
            }
            for s, bz in keys
        ]

    def to_dict(self) -> dict:
        return {"summary": self.table(), "runs": [r.__dict__ for r in self.results]}


def ablation_compare(grid: Iterable[RunSpec], seeds: Sequence[int], phases=None, eval_set=None) -> AblationSummary:
    grid = list(grid)
    phases = fixture_phases() if phases is None else phases
    eval_set = fixture_eval_set() if eval_set is None else eval_set
    results = [run_one(spec, seed, phases, eval_set) for spec in grid for seed in seeds]
    return AblationSummary(results)
