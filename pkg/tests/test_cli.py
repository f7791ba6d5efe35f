import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from chartroute import cli
from chartroute.connector import GateNet, load_connector, save_connector
from chartroute import train as T


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.mark.parametrize("cmd", list(cli.COMMANDS))
def test_help_documents_every_flag(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([cmd, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for key in cli.COMMANDS[cmd][2]:
        assert "--" + key.replace("_", "-") in text


def test_config_file_merge_and_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 3, "seed": 5}))
    code, res, _ = run(capsys, "synth", "--config", str(cfg), "--n", "2", "--out", str(tmp_path / "s"))
    assert code == 0 and res["n_requested"] == 2 and res["retention"] == 1.0
    first = json.loads((tmp_path / "s" / "manifest.jsonl").read_text().splitlines()[0])
    assert first["seed"] == 5
    cfg.write_text(json.dumps({"n": 3, "colour": "red"}))
    code, _, err = run(capsys, "synth", "--config", str(cfg))
    assert code == 1 and "colour" in err


def test_io_error_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "synth", "--n", "1", "--out", str(blocker / "sub"))
    assert code == 2 and err
    code, _, _ = run(capsys, "route-viz", "--connector", str(tmp_path / "missing.json"))
    assert code == 2


def test_env_var_sets_default_output(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    code, res, _ = run(capsys, "init", "--strategy", "random", "--seed", "1")
    assert code == 0 and res["connector"].startswith(str(tmp_path / "envout"))
    c = load_connector(res["connector"])
    assert c.L == 4 and c.K == 2 and c.renormalize


def test_faithful_topk_flag(tmp_path, capsys):
    code, res, _ = run(capsys, "init", "--strategy", "random", "--faithful-topk", "--out", str(tmp_path / "c.json"))
    assert code == 0 and res["renormalize"] is False


def test_route_viz_zero_gate_all_e0(tmp_path, capsys):
    c = T.init_moe("random", seed=0)
    assert not c.gate.Wg.any()
    save_connector(c, tmp_path / "c.json")
    code, res, _ = run(capsys, "route-viz", "--connector", str(tmp_path / "c.json"), "--out", str(tmp_path / "m.svg"))
    assert code == 0 and res["top1_counts"] == [49, 0, 0, 0]
    root = ET.parse(tmp_path / "m.svg").getroot()
    cells = [el for el in root.iter() if el.get("class") == "cell"]
    assert len(cells) == 49 and {el.get("data-expert") for el in cells} == {"0"}
    legend = [el for el in root.iter() if el.get("class") == "legend-entry"]
    assert len(legend) == 4


def test_route_viz_colors_follow_top1(tmp_path, capsys):
    rng = np.random.default_rng(0)
    c = T.init_moe("random", seed=0)
    c.gate = GateNet(rng.normal(size=(32, 4)), np.zeros(4))
    save_connector(c, tmp_path / "c.json")
    code, res, _ = run(capsys, "route-viz", "--connector", str(tmp_path / "c.json"), "--out", str(tmp_path / "m.svg"))
    root = ET.parse(tmp_path / "m.svg").getroot()
    cells = [el for el in root.iter() if el.get("class") == "cell"]
    for el in cells:
        assert el.get("fill") == cli.EXPERT_COLORS[int(el.get("data-expert"))]
    assert sum(res["top1_counts"]) == 49


def test_eval_command(tmp_path, capsys):
    p = tmp_path / "p.jsonl"
    rows = [
        {"id": "1", "question": "q", "ground_truth": "100", "prediction": "95"},
        {"id": "2", "question": "q", "ground_truth": "100", "prediction": "answer=1/0"},
        {"id": "3", "question": "q", "ground_truth": "6", "prediction": "a=[1,2,3]; answer=sum(a)"},
    ]
    p.write_text("\n".join(json.dumps(r) for r in rows))
    code, res, _ = run(capsys, "eval", "--predictions", str(p), "--pot", "--out", str(tmp_path / "r.json"))
    assert code == 0 and res["pot_errors"] == 1
    assert res["accuracies"]["0.05"] == pytest.approx(2 / 3)
    assert json.loads((tmp_path / "r.json").read_text())["items"][1]["verdict_per_margin"]["0.2"] is False
    code, _, _ = run(capsys, "eval")
    assert code == 1


def test_grad_check_command(capsys):
    code, res, _ = run(capsys, "grad-check", "--configs", "4", "--seed", "3")
    assert code == 0 and res["passed"] and res["max_rel_err"] <= 1e-4
    assert [c["L"] for c in res["cases"]] == [1, 2, 4, 8]
    code, _, _ = run(capsys, "grad-check", "--max-dim", "65")
    assert code == 1


def test_align_command_writes_expert_and_log(tmp_path, capsys):
    out = tmp_path / "align_code.json"
    code, res, _ = run(capsys, "align", "--kind", "code", "--n", "8", "--epochs", "1", "--out", str(out))
    assert code == 0 and res["steps"] == 1
    assert json.loads(out.read_text())["label"] == "code"
    assert out.with_suffix(".log.jsonl").exists()
    code, _, _ = run(capsys, "align", "--kind", "yaml")
    assert code == 1
