import json
import re

import numpy as np
import pytest

from cimadapt.cli import ARTIFACTS, config_hash, load_config, main, scaled
from cimadapt.config import MacroConfig
from cimadapt.model import toy_cnn
from cimadapt.report import COLUMNS, add_deltas, format_delta, report_row

# a desk-sized synthetic task; epoch counts come from the defaults times --scale
SMALL = {"data": {"per_class": 50, "resolution": 8}, "model": {"input_resolution": 8},
         "morph": {"lambda_max": 1e-4, "shrink_epochs": 1200, "iterations": 1},
         "calibration": {"images": 32}, "simulate": {"images": 8}}


def write_config(tmp_path, cfg=SMALL):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def run_cli(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root)
    outs = []
    for name in ("a", "b"):
        out = root / name
        assert main(["pipeline", "--config", cfg, "--seed", "7", "--out", str(out), "--scale", "0.05"]) == 0
        outs.append(out)
    return outs


def test_format_delta_examples():
    assert format_delta(21, 100) == "-79%"
    assert format_delta(50, 100) == "-50%"
    assert format_delta(11, 100) == "-89%"
    assert format_delta(100, 100) == "+0%"
    assert format_delta(1005, 1000) == "+1%"  # 0.5 rounds away from zero
    assert format_delta(5, 0) == "n/a"


def test_report_row_and_deltas(macro):
    base = report_row("toy", toy_cnn(), macro, None, {"seed": 98.0})
    assert all(c in base for c in COLUMNS)
    assert base["BLs"] == 368 and base["Load Weight Latency"] == 512 and base["Acc seed"] == 98.0
    small = report_row("small", toy_cnn(widths=(8, 16, 32, 32)), macro, 184, {"morph": 98.5})
    row = add_deltas(small, base)
    assert row["BLs delta"] == format_delta(small["BLs"], 368)
    assert row["Acc morph delta"] == "+0.50%"
    assert 0 < row["Macro Usage"] <= 1


def test_scaled_epochs():
    assert [scaled(e, 0.05) for e in (0, 1, 10, 100, 2000)] == [0, 1, 1, 5, 100]
    assert scaled(30, 0.05) == 2  # 1.5 rounds away from zero


def test_config_merge_and_hash(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg["data"]["per_class"] == 50 and cfg["data"]["noise"] == 0.25
    assert config_hash(cfg) == config_hash(load_config(write_config(tmp_path)))
    assert config_hash(cfg) != config_hash(load_config(None))


def test_map_from_config(tmp_path, capsys):
    code, _ = run_cli(capsys, "map", "--seed", "0", "--out", str(tmp_path))
    assert code == 0
    metrics = json.loads((tmp_path / "mapping.json").read_text())["metrics"]
    assert metrics["BLs"] == 368 and metrics["Load Weight Latency"] == 512
    assert (tmp_path / "mapping.png").read_bytes()[:4] == b"\x89PNG"
    assert "manifest.json" in {p.name for p in tmp_path.iterdir()}


def test_missing_upstream_names_stage(tmp_path, capsys):
    for cmd, first in (("morph", "train-seed"), ("qat-phase2", "qat-phase1"), ("simulate", "qat-phase2"),
                       ("report", "train-seed")):
        code, err = run_cli(capsys, cmd, "--seed", "0", "--out", str(tmp_path))
        assert code != 0
        obj = json.loads(err.strip().splitlines()[-1])
        assert obj["run_first"] == first and obj["command"] == cmd and first in obj["message"]


def test_bad_arguments(tmp_path, capsys):
    code, err = run_cli(capsys, "map", "--seed", "-1", "--out", str(tmp_path))
    assert code == 1 and "seed" in json.loads(err)["message"]
    code, err = run_cli(capsys, "map", "--seed", "0", "--out", str(tmp_path), "--scale", "0")
    assert code == 1 and "scale" in json.loads(err)["message"]
    with pytest.raises(SystemExit):
        main(["map", "--out", str(tmp_path)])


def test_pipeline_emits_all_artifacts(pipeline_runs):
    out = pipeline_runs[0]
    names = {p.name for p in out.iterdir()}
    expected = set(ARTIFACTS.values()) | {
        "seed.json", "morph.json", "phase1.json", "phase2.json", "model.cimq", "mapping.json", "mapping.csv",
        "mapping.png", "sim_logits.json", "sim_trace.json", "report.json", "report.csv", "mapping_baseline.png",
        "mapping_adapted.png", "layer_bitlines.png", "curves.png", "manifest.json"}
    assert expected <= names
    sim = json.loads((out / "sim_logits.json").read_text())
    assert sim["max_abs_logit_diff_vs_training_graph"] <= 1e-9 and sim["prediction_agreement"] == 1.0
    rows = json.loads((out / "report.json").read_text())
    assert len(rows) == 2
    assert all(re.fullmatch(r"[+-]\d+%", rows[1][f"{c} delta"]) for c in ("Param", "BLs", "MACs"))
    assert rows[1]["BLs"] <= rows[1]["BL Constraint"]
    trace = json.loads((out / "sim_trace.json").read_text())
    assert trace["images"] == 8 and trace["conversions"] > 0


def test_pipeline_is_deterministic(pipeline_runs):
    a, b = (json.loads((out / "manifest.json").read_text()) for out in pipeline_runs)
    assert a["stages"] == b["stages"] and a["config_sha256"] == b["config_sha256"]
    for name in ("phase2.ckpt", "report.json", "sim_trace.json", "model.cimq", "curves.png"):
        assert (pipeline_runs[0] / name).read_bytes() == (pipeline_runs[1] / name).read_bytes()


def test_simulate_reads_raw_input(pipeline_runs, tmp_path, capsys):
    src = pipeline_runs[0]
    work = tmp_path / "run"
    work.mkdir()
    for name in ("model.cimq", "phase2.ckpt"):
        (work / name).write_bytes((src / name).read_bytes())
    x = np.random.default_rng(0).uniform(0, 1, (3, 3, 8, 8))
    raw = tmp_path / "x.bin"
    raw.write_bytes(x.astype("<f8").tobytes())
    np.save(tmp_path / "x.npy", x)
    cfg = write_config(tmp_path)
    outs = []
    for path in (raw, tmp_path / "x.npy"):
        code, err = run_cli(capsys, "simulate", "--config", cfg, "--seed", "7", "--out", str(work), "--input", str(path))
        assert code == 0, err
        outs.append(json.loads((work / "sim_logits.json").read_text()))
    assert outs[0]["logits"] == outs[1]["logits"] and len(outs[0]["predictions"]) == 3
    assert outs[0]["max_abs_logit_diff_vs_training_graph"] <= 1e-9


def test_power_of_two_flag_reaches_export(pipeline_runs, tmp_path, capsys):
    work = tmp_path / "p2"
    work.mkdir()
    (work / "phase1.ckpt").write_bytes((pipeline_runs[0] / "phase1.ckpt").read_bytes())
    cfg = write_config(tmp_path)
    code, err = run_cli(capsys, "qat-phase2", "--config", cfg, "--seed", "7", "--out", str(work),
                        "--scale", "0.01", "--power-of-two")
    assert code == 0, err
    info = json.loads((work / "phase2.json").read_text())
    assert info["power_of_two"] and all(2.0 ** s["shift"] == s["scale"] for s in info["scales"])
    assert MacroConfig.from_json(load_config(None)["macro"]) == MacroConfig()
