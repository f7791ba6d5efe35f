"""Command-line entry point: ``chartroute <command> [flags]``.

Every command accepts ``--config FILE`` (a JSON object).  Values from the
file override built-in defaults and explicit flags override the file.
Unknown keys are rejected.  Exit codes: 0 ok, 1 config error, 2 I/O error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import train as T
from .chartsynth import SpecError, make_quadruple, synth_batch
from .connector import (
    ConfigError,
    ExpertMLP,
    GateNet,
    MoEConnector,
    UsageError,
    aux_loss_grads,
    expert_from_dict,
    expert_to_dict,
    load_connector,
    moe_backward,
    moe_forward,
    save_connector,
    top1_experts,
)
from .evalkit import DEFAULT_MARGINS, read_predictions, score_report
from .numkit import NumericError, grad_check, mse_loss
from .toystack import DecoderHead, decode_backward, decode_with_lora, encode_chart

OUT_ENV = "CHARTROUTE_OUT"
EXPERT_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "chartroute_out"))


# --------------------------------------------------------------------------
# config merging


def _merge(defaults: dict, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def head_to_dict(head: DecoderHead, seed: int) -> dict:
    return {
        "kind": "decoder_head",
        "seed": seed,
        "d_out": head.W.shape[0],
        "dim": head.W.shape[1],
        "scale": head.scale,
        "lora_A": head.lora_A.tolist(),
        "lora_B": head.lora_B.tolist(),
    }


def head_from_dict(d: dict) -> DecoderHead:
    A = np.array(d["lora_A"], dtype=np.float64)
    head = DecoderHead.build(d["d_out"], d["dim"], A.shape[1], seed=d["seed"])
    head.lora_A, head.lora_B, head.scale = A, np.array(d["lora_B"], dtype=np.float64), float(d["scale"])
    return head


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> dict:
    out = Path(cfg["out"] or default_out() / "synth")
    m = synth_batch(int(cfg["n"]), int(cfg["seed"]), out, workers=int(cfg["workers"]))
    return {"manifest": str(m.path), "n_requested": m.n_requested, "n_retained": m.n_retained, "retention": m.retention, "sha256": m.sha256}


def cmd_align(cfg: dict) -> dict:
    kind = cfg["kind"]
    if kind == "general":
        task = T.fixture_general_task(int(cfg["n"] or T.GENERAL_SIZE))
    elif kind in T.ALIGN_KINDS:
        task = T.fixture_align_task(kind, int(cfg["n"]) if cfg["n"] else None)
    else:
        raise ConfigError(f"unknown alignment kind {kind!r}")
    log = T.TrainLog(int(cfg["seed"]))
    e = T.align_connector(task, int(cfg["seed"]), int(cfg["epochs"]), float(cfg["lr"]), log=log)
    out = Path(cfg["out"] or default_out() / f"align_{kind}.json")
    _write_json(out, {"kind": "expert", "label": kind, **expert_to_dict(e)})
    log.write_jsonl(out.with_suffix(".log.jsonl"))
    return {"expert": str(out), "kind": kind, "final_loss": T.align_loss(e, task), "steps": len(log.records)}


def _load_aligned(align_dir, seed: int):
    if not align_dir:
        return T.aligned_experts(seed)
    d = Path(align_dir)
    aligned = {k: expert_from_dict(json.loads((d / f"align_{k}.json").read_text())) for k in T.ALIGN_KINDS}
    vanilla = expert_from_dict(json.loads((d / "align_general.json").read_text()))
    return aligned, vanilla


def cmd_init(cfg: dict) -> dict:
    seed = int(cfg["seed"])
    aligned, vanilla = (None, None)
    if cfg["strategy"] != "random":
        aligned, vanilla = _load_aligned(cfg["align_dir"], seed)
    c = T.init_moe(cfg["strategy"], aligned, vanilla, int(cfg["L"]), int(cfg["K"]), seed, not cfg["faithful_topk"])
    out = Path(cfg["out"] or default_out() / f"connector_{cfg['strategy']}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_connector(c, out)
    return {"connector": str(out), "strategy": cfg["strategy"], "L": c.L, "K": c.K, "renormalize": c.renormalize}


def _phases(cfg: dict) -> list[T.Phase]:
    return T.fixture_phases(int(cfg["sft_size"]), int(cfg["anneal_size"]), (int(cfg["epochs1"]), int(cfg["epochs2"])))


def cmd_sft(cfg: dict) -> dict:
    seed = int(cfg["seed"])
    c = load_connector(cfg["connector"])
    if cfg["faithful_topk"]:
        c.renormalize = False
    head = DecoderHead.build(c.dims[2], seed=0, lora_seed=seed)
    c, head, log = T.sft_run(c, head, _phases(cfg), bool(cfg["bz_loss"]), seed)
    ev = T.evaluate(c, head, T.fixture_eval_set(int(cfg["eval_size"])))
    out = Path(cfg["out"] or default_out() / "sft")
    out.mkdir(parents=True, exist_ok=True)
    save_connector(c, out / "connector.json")
    _write_json(out / "head.json", head_to_dict(head, 0))
    log.write_jsonl(out / "train_log.jsonl")
    _write_json(out / "usage.json", log.usage)
    return {"out": str(out), "final_train_loss": log.losses[-1] if log.losses else None, "eval_loss": ev.loss, "acc05": ev.acc05, "chi_square": ev.usage_chi_square}


def cmd_ablate(cfg: dict) -> dict:
    strategies = cfg["strategies"]
    if isinstance(strategies, str):
        strategies = [s for s in strategies.split(",") if s]
    bz_grid = [False, True] if cfg["bz_grid"] else [bool(cfg["bz_loss"])]
    seeds = list(range(int(cfg["seed"]), int(cfg["seed"]) + int(cfg["seeds"])))
    grid = [T.RunSpec(s, bz) for s in strategies for bz in bz_grid]
    summary = T.ablation_compare(grid, seeds)
    out = Path(cfg["out"] or default_out() / "ablation.json")
    _write_json(out, summary.to_dict())
    return {"summary": str(out), "table": summary.table()}


def cmd_eval(cfg: dict) -> dict:
    if not cfg["predictions"]:
        raise ConfigError("eval needs --predictions")
    margins = cfg["margins"]
    if isinstance(margins, str):
        margins = [float(m) for m in margins.split(",")]
    report = score_report(read_predictions(cfg["predictions"]), margins, bool(cfg["pot"]))
    d = report.to_dict()
    if cfg["out"]:
        _write_json(Path(cfg["out"]), d)
    return {"accuracies": d["accuracies"], "pot_errors": report.pot_errors, "n": len(d["items"])}


def route_map_svg(cells: np.ndarray, grid: int, raster: np.ndarray | None = None, size: int = 490) -> str:
    """Overlay each patch cell with its top-1 expert color plus an E0..E3 legend."""
    cell = size / grid
    legend_h = 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + legend_h}" '
        f'viewBox="0 0 {size} {size + legend_h}">'
    ]
    if raster is not None:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(raster).save(buf, format="PNG")
        data = base64.b64encode(buf.getvalue()).decode("ascii")
        parts.append(f'<image x="0" y="0" width="{size}" height="{size}" href="data:image/png;base64,{data}"/>')
    for idx, e in enumerate(cells.tolist()):
        r, c = divmod(idx, grid)
        parts.append(
            f'<rect class="cell" data-expert="{e}" x="{c * cell:.2f}" y="{r * cell:.2f}" width="{cell:.2f}" '
            f'height="{cell:.2f}" fill="{EXPERT_COLORS[e % len(EXPERT_COLORS)]}" fill-opacity="0.45" stroke="#ffffff"/>'
        )
    parts.append('<g class="legend">')
    for j, color in enumerate(EXPERT_COLORS):
        x = 10 + j * 110
        parts.append(
            f'<g class="legend-entry"><rect x="{x}" y="{size + 8}" width="14" height="14" fill="{color}"/>'
            f'<text x="{x + 20}" y="{size + 20}" font-size="12">{escape(f"E{j}")}</text></g>'
        )
    parts.append("</g></svg>")
    return "".join(parts)


def cmd_route_viz(cfg: dict) -> dict:
    if not cfg["connector"]:
        raise ConfigError("route-viz needs --connector")
    c = load_connector(cfg["connector"])
    if c.L > len(EXPERT_COLORS):
        raise ConfigError(f"route-viz supports at most {len(EXPERT_COLORS)} experts")
    stack = T.default_stack(0)
    raster = make_quadruple(int(cfg["chart_seed"])).raster
    tokens = encode_chart(stack.encoder, raster)
    if tokens.shape[1] != c.dims[0]:
        raise ConfigError(f"connector expects d_in={c.dims[0]}, encoder gives {tokens.shape[1]}")
    cells = top1_experts(c, tokens)
    out = Path(cfg["out"] or default_out() / "route_map.svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(route_map_svg(cells, stack.encoder.grid, raster), encoding="utf-8")
    counts = np.bincount(cells, minlength=c.L).tolist()
    return {"svg": str(out), "cells": int(cells.size), "top1_counts": counts}


# --------------------------------------------------------------------------
# gradient check over random configurations


@dataclass
class GradCheckCase:
    L: int
    K: int
    dims: tuple[int, int, int]
    renormalize: bool
    bz_loss: bool
    max_rel_err: float
    passed: bool
    groups: tuple[str, ...] = ()


def grad_check_case(rng: np.random.Generator, L: int, max_dim: int = 12) -> GradCheckCase:
    """One random connector + LoRA head, checked through pooled decoding."""
    K = int(rng.integers(1, L + 1))
    d_in, d_h, d_out = (int(v) for v in rng.integers(2, max_dim + 1, size=3))
    E, r = int(rng.integers(2, max_dim + 1)), int(rng.integers(1, 4))
    renorm, bz = bool(rng.integers(2)), bool(rng.integers(2))
    # fan-in scaling keeps the loss O(1), so central-difference round-off
    # stays well below the tolerance on small gradient entries
    def w(a, b):
        return rng.normal(size=(a, b)) / np.sqrt(a)

    experts = [ExpertMLP(w(d_in, d_h), 0.5 * rng.normal(size=d_h), w(d_h, d_out), 0.5 * rng.normal(size=d_out)) for _ in range(L)]
    c = MoEConnector(experts, GateNet(w(d_in, L), rng.normal(size=L)), K, renorm)
    head = DecoderHead.build(d_out, E, r, seed=int(rng.integers(1 << 30)))
    head.lora_B = w(r, E)
    B, N = 2, 3
    X = rng.normal(size=(B * N, d_in))
    Y = rng.normal(size=(B, E))

    def loss_fn():
        y, trace, cache = moe_forward(c, X)
        pooled = y.reshape(B, N, -1).mean(axis=1)
        loss, dout = mse_loss(decode_with_lora(head, pooled), Y)
        dpooled, grads = decode_backward(head, pooled, dout)
        dy = np.repeat(dpooled[:, None, :] / N, N, axis=1).reshape(B * N, -1)
        ep = ez = None
        if bz:
            aux, ep, ez = aux_loss_grads(trace, 0.1, 0.05)
            loss += aux
        _, g = moe_backward(c, trace, cache, dy, ep, ez)
        grads.update(g)
        return loss, grads

    params = {**c.params(), **head.lora_params()}
    rep = grad_check(loss_fn, params)
    groups = tuple(sorted({k.split(".")[0] for k in params}))
    return GradCheckCase(L, K, (d_in, d_h, d_out), renorm, bz, float(rep.max_rel_err), bool(rep.max_rel_err <= 1e-4), groups)


def run_grad_checks(n_configs: int = 20, seed: int = 0, max_dim: int = 12) -> list[GradCheckCase]:
    if max_dim > 64:
        raise ConfigError("max_dim must be <= 64")
    rng = np.random.default_rng([seed, 0x6C])
    Ls = (1, 2, 4, 8)
    return [grad_check_case(rng, Ls[i % len(Ls)], max_dim) for i in range(n_configs)]


def cmd_grad_check(cfg: dict) -> dict:
    cases = run_grad_checks(int(cfg["configs"]), int(cfg["seed"]), int(cfg["max_dim"]))
    worst = max(c.max_rel_err for c in cases)
    result = {"configs": len(cases), "max_rel_err": worst, "passed": all(c.passed for c in cases), "cases": [c.__dict__ for c in cases]}
    if not result["passed"]:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} > 1e-4")
    return result


# --------------------------------------------------------------------------
# parser


COMMANDS = {
    "synth": (cmd_synth, "Generate chart quadruples and a JSON-lines manifest.", {"n": 1000, "seed": 0, "out": None, "workers": 1}),
    "align": (
        cmd_align,
        "Pre-train one connector on a chart-to-text (or general image) alignment task.",
        {"kind": "table", "n": None, "seed": 0, "epochs": T.ALIGN_EPOCHS, "lr": T.ALIGN_LR, "out": None},
    ),
    "init": (
        cmd_init,
        "Build an MoE connector from aligned experts.",
        {"strategy": "diverse", "seed": 0, "L": T.N_EXPERTS, "K": T.TOP_K, "align_dir": None, "faithful_topk": False, "out": None},
    ),
    "sft": (
        cmd_sft,
        "Two-phase supervised fine-tuning of gate, experts and LoRA factors.",
        {
            "connector": None, "seed": 0, "bz_loss": False, "faithful_topk": False,
            "sft_size": T.SFT_SIZE, "anneal_size": T.ANNEAL_SIZE, "epochs1": T.SFT_EPOCHS[0], "epochs2": T.SFT_EPOCHS[1],
            "eval_size": T.EVAL_SIZE, "out": None,
        },
    ),
    "ablate": (
        cmd_ablate,
        "Compare initialization strategies (and bz-loss) over several seeds.",
        {"strategies": list(T.STRATEGIES), "seeds": 5, "seed": 0, "bz_loss": False, "bz_grid": False, "out": None},
    ),
    "eval": (cmd_eval, "Score a predictions file with relaxed accuracy.", {"predictions": None, "margins": list(DEFAULT_MARGINS), "pot": False, "out": None}),
    "route-viz": (cmd_route_viz, "Write an SVG map of per-patch top-1 experts.", {"connector": None, "chart_seed": 0, "out": None}),
    "grad-check": (cmd_grad_check, "Finite-difference check over random MoE configurations.", {"configs": 20, "seed": 0, "max_dim": 12}),
}

_HELP = {
    "n": "number of items", "seed": "random seed", "out": f"output path (default under ${OUT_ENV} or ./chartroute_out)",
    "workers": "worker processes", "kind": "alignment task: table, json, code or general", "epochs": "training epochs",
    "lr": "peak learning rate", "strategy": "random, co_upcycle or diverse", "L": "number of experts", "K": "experts kept per token",
    "align_dir": "directory with align_{table,json,code,general}.json (default: train them)",
    "faithful_topk": "keep raw top-K probabilities instead of renormalizing", "connector": "connector checkpoint (JSON)",
    "bz_loss": "add balance and router z-loss", "sft_size": "phase-1 charts", "anneal_size": "phase-2 charts",
    "epochs1": "phase-1 epochs", "epochs2": "phase-2 epochs", "eval_size": "evaluation charts",
    "strategies": "comma-separated strategies", "seeds": "number of consecutive seeds", "bz_grid": "run with and without bz-loss",
    "predictions": "JSON-lines predictions file", "margins": "comma-separated relative margins", "pot": "execute program-of-thought predictions",
    "chart_seed": "seed of the fixture chart to map", "configs": "number of random configurations", "max_dim": "largest layer width (<= 64)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chartroute", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, defaults) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file with any of the flags below (flags win)")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            h = f"{_HELP[key]} (default: {default})"
            if isinstance(default, bool):
                p.add_argument(flag, dest=key, action="store_true", default=None, help=h)
            elif key in ("strategies", "margins"):
                p.add_argument(flag, dest=key, default=None, help=h)
            else:
                typ = type(default) if default is not None and not isinstance(default, (list, tuple)) else str
                if key == "n":
                    typ = int
                p.add_argument(flag, dest=key, type=typ, default=None, help=h)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fn, _, defaults = COMMANDS[args.command]
    try:
        cfg = _merge(defaults, args)
        result = fn(cfg)
    except (ConfigError, UsageError, SpecError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
