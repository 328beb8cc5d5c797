"""Command-line driver: one subcommand per adaptation stage plus ``pipeline``.

Every stage reads its inputs from and writes its outputs to ``--out``; the
run manifest (config hash, seed, scale, package versions and output digests)
is kept in ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import MacroConfig, round_half_away
from .data import Dataset, load_cifar10_binary, synthetic_dataset, train_test_split
from .intmodel import load_integer_model, save_integer_model
from .mapper import build_plan, plan_to_json
from .model import build
from .morphing import MorphConfig, morph_iterate
from .qat import calibrate_adc_step, clipping_rate, export_integer_model, phase1_train, phase2_train
from .report import add_deltas, report_row, write_csv, write_json
from .sim import simulate_inference
from .training import evaluate, logits, train_seed

log = logging.getLogger("cimadapt")

STAGES = ("train-seed", "morph", "qat-phase1", "qat-phase2", "map", "simulate", "report")

# Stage hyperparameters at the published epoch counts; ``--scale`` shrinks them.
DEFAULT_CONFIG = {
    "macro": MacroConfig().to_json(),
    "model": {"arch": "toy-cnn", "num_classes": 2, "input_resolution": 16},
    "data": {"source": "synthetic", "classes": 2, "per_class": 500, "resolution": 16, "noise": 0.25,
             "shift": 0, "test_fraction": 0.2},
    "augment": {"crop_pad": 0, "flip": False},
    "seed_training": {"epochs": 2000, "lr": 0.01, "batch_size": 64},
    "morph": {"target_fraction": 0.5, "lambda_max": 5e-8, "ramp_epochs": 100, "shrink_epochs": 150,
              "shrink_lr": 0.05, "finetune_epochs": 300, "finetune_lr": 0.01, "tau": 1e-2, "iterations": 3},
    "phase1": {"epochs": 100, "lr": 0.001},
    "phase2": {"epochs": 300, "lr": 0.01},
    "calibration": {"images": 256, "percentile": 99.9},
    "simulate": {"images": 100},
}

ARTIFACTS = {
    "train-seed": "seed.ckpt",
    "morph": "morphed.ckpt",
    "qat-phase1": "phase1.ckpt",
    "qat-phase2": "phase2.ckpt",
}


class StageError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise StageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise StageError(f"config file {path} is not valid JSON: {exc}") from None
    return merge(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def scaled(epochs: int, scale: float) -> int:
    """Epoch count under ``--scale``; a non-zero count never drops below 1."""
    if epochs <= 0:
        return 0
    return max(1, int(round_half_away(epochs * scale)))


class Run:
    """Shared state of one CLI invocation."""

    def __init__(self, args):
        self.cfg = load_config(args.config)
        self.seed = args.seed
        self.scale = args.scale
        self.out = Path(args.out)
        self.power_of_two = args.power_of_two
        self.out.mkdir(parents=True, exist_ok=True)
        self.macro = MacroConfig.from_json(self.cfg["macro"])
        self._data = None

    def rng(self, stage: str) -> np.random.Generator:
        # one root seed; each stage draws from its own child stream so stages rerun independently
        return np.random.default_rng([self.seed, STAGES.index(stage)])

    def data(self) -> tuple[Dataset, Dataset]:
        if self._data is None:
            d = self.cfg["data"]
            if d["source"] == "synthetic":
                ds = synthetic_dataset(d["classes"], d["per_class"], d["resolution"], d.get("seed", self.seed),
                                       d.get("noise", 0.25), shift=d.get("shift", 0))
                self._data = train_test_split(ds, d.get("test_fraction", 0.2))
            elif d["source"] == "cifar10":
                kw = {"classes": d.get("classes"), "per_class": d.get("per_class"),
                      "downsample": d.get("downsample", 1)}
                self._data = (load_cifar10_binary(d["dir"], "train", **kw),
                              load_cifar10_binary(d["dir"], "test", **kw))
            else:
                raise StageError(f"unknown data source {d['source']!r}")
        return self._data

    def epochs(self, block: str, key: str = "epochs") -> int:
        return scaled(self.cfg[block][key], self.scale)

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, stage: str):
        p = self.path(ARTIFACTS[stage])
        if not p.exists():
            raise StageError(f"missing {p.name} in {self.out}; run `{stage}` first", stage)
        return load_checkpoint(p, with_meta=True)

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def read_json(self, name: str) -> dict:
        p = self.path(name)
        return json.loads(p.read_text()) if p.exists() else {}

    def record(self, stage: str, outputs: list[str]) -> None:
        manifest = self.read_json("manifest.json")
        manifest.update({
            "config_sha256": config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.seed,
            "scale": self.scale,
            "versions": {"cimadapt": __version__, "numpy": np.__version__, "python": platform.python_version()},
        })
        manifest.setdefault("stages", {})[stage] = {
            name: hashlib.sha256(self.path(name).read_bytes()).hexdigest() for name in outputs
        }
        self.write_json("manifest.json", manifest)


# -- stages -----------------------------------------------------------------------


def stage_train_seed(run: Run) -> None:
    train_data, test_data = run.data()
    mc = run.cfg["model"]
    rng = run.rng("train-seed")
    model = build(mc["arch"], rng, **{k: v for k, v in mc.items() if k != "arch"})
    sc = run.cfg["seed_training"]
    history = train_seed(model, run.macro, train_data, run.epochs("seed_training"), sc["lr"], rng,
                         batch_size=sc.get("batch_size", 64), augment=run.cfg.get("augment"))
    acc = evaluate(model, run.macro, test_data)
    save_checkpoint(model, run.path("seed.ckpt"), {"stage": "train-seed", "accuracy": acc})
    run.write_json("seed.json", {"accuracy": acc, "loss": history})
    run.record("train-seed", ["seed.ckpt", "seed.json"])
    log.info("seed model: accuracy %.2f%%", acc)


def morph_config(run: Run, baseline_bls: int) -> MorphConfig:
    m = dict(run.cfg["morph"])
    target = m.pop("target_bl", None)
    frac = m.pop("target_fraction", 0.5)
    if target is None:
        target = int(baseline_bls * frac)
    for key in ("ramp_epochs", "shrink_epochs", "finetune_epochs"):
        m[key] = scaled(m[key], run.scale)
    return MorphConfig(target_bl=int(target), **m)


def stage_morph(run: Run) -> None:
    seed, _ = run.require("train-seed")
    train_data, test_data = run.data()
    cfg = morph_config(run, build_plan(seed, run.macro).used_bls)
    model, report = morph_iterate(seed, cfg, train_data, test_data, run.macro, run.rng("morph"))
    acc = report.iterations[-1]["accuracy"] if report.iterations else report.seed["accuracy"]
    save_checkpoint(model, run.path("morphed.ckpt"), {"stage": "morph", "accuracy": acc})
    run.write_json("morph.json", report.to_json())
    run.record("morph", ["morphed.ckpt", "morph.json"])


def stage_phase1(run: Run) -> None:
    model, _ = run.require("morph")
    train_data, test_data = run.data()
    p1 = run.cfg["phase1"]
    phase1_train(model, run.macro, train_data, run.epochs("phase1"), p1["lr"], run.rng("qat-phase1"))
    acc = evaluate(model, run.macro, test_data, "phase1")
    save_checkpoint(model, run.path("phase1.ckpt"), {"stage": "qat-phase1", "accuracy": acc})
    run.write_json("phase1.json", {"accuracy": acc, "float_accuracy": evaluate(model, run.macro, test_data)})
    run.record("qat-phase1", ["phase1.ckpt", "phase1.json"])


def stage_phase2(run: Run) -> None:
    model, _ = run.require("qat-phase1")
    train_data, test_data = run.data()
    cal = run.cfg["calibration"]
    batch = train_data.images[:cal["images"]]
    steps = calibrate_adc_step(model, run.macro, batch, cal["percentile"])
    start = evaluate(model, run.macro, test_data, "phase2")
    clip = clipping_rate(model, run.macro, batch)
    p2 = run.cfg["phase2"]
    phase2_train(model, run.macro, train_data, run.epochs("phase2"), p2["lr"], run.rng("qat-phase2"))
    acc = evaluate(model, run.macro, test_data, "phase2")
    save_checkpoint(model, run.path("phase2.ckpt"), {"stage": "qat-phase2", "accuracy": acc})
    imodel = export_integer_model(model, run.macro, run.power_of_two)
    save_integer_model(imodel, run.path("model.cimq"))
    run.write_json("phase2.json", {
        "start_accuracy": start, "accuracy": acc, "adc_steps": steps, "calibration_clip_rate": clip,
        "power_of_two": run.power_of_two, "scales": imodel.scale_report(),
    })
    run.record("qat-phase2", ["phase2.ckpt", "phase2.json", "model.cimq"])


def _latest_model(run: Run):
    for stage in ("qat-phase2", "qat-phase1", "morph", "train-seed"):
        p = run.path(ARTIFACTS[stage])
        if p.exists():
            return load_checkpoint(p), stage
    mc = run.cfg["model"]
    return build(mc["arch"], None, **{k: v for k, v in mc.items() if k != "arch"}), "config"


def stage_map(run: Run) -> None:
    from .plotting import plot_mapping

    model, source = _latest_model(run)
    plan = build_plan(model, run.macro)
    row = report_row(f"{model.arch} ({source})", model, run.macro, plan.used_bls)
    run.write_json("mapping.json", {"source": source, "metrics": row, "plan": plan_to_json(plan)})
    write_csv([row], run.path("mapping.csv"))
    plot_mapping(plan, run.path("mapping.png"), f"{model.arch}: {plan.used_bls} BLs in {plan.tiles} tile(s)")
    run.record("map", ["mapping.json", "mapping.csv", "mapping.png"])


def read_images(path, channels: int, resolution: int) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        x = np.load(p)
    else:
        x = np.frombuffer(p.read_bytes(), dtype="<f8").reshape(-1, channels, resolution, resolution)
    return np.asarray(x, dtype=np.float64)


def stage_simulate(run: Run, input_path=None) -> None:
    p = run.path("model.cimq")
    if not p.exists():
        raise StageError(f"missing model.cimq in {run.out}; run `qat-phase2` first", "qat-phase2")
    imodel = load_integer_model(p)
    if input_path is not None:
        images = read_images(input_path, imodel.input_channels, imodel.input_resolution)
    else:
        images = run.data()[1].images[:run.cfg["simulate"]["images"]]
    out, trace = simulate_inference(imodel, images)
    result = {"logits": out.tolist(), "predictions": out.argmax(axis=1).tolist()}
    ckpt = run.path("phase2.ckpt")
    if ckpt.exists() and not imodel.power_of_two:
        ref = logits(load_checkpoint(ckpt), imodel.macro, images, "phase2")
        result["max_abs_logit_diff_vs_training_graph"] = float(np.abs(ref - out).max())
        result["prediction_agreement"] = float((ref.argmax(axis=1) == out.argmax(axis=1)).mean())
    run.write_json("sim_logits.json", result)
    run.write_json("sim_trace.json", trace.to_json())
    run.record("simulate", ["sim_logits.json", "sim_trace.json"])


def stage_report(run: Run) -> None:
    from .plotting import plot_curves, plot_layer_bitlines, plot_mapping

    seed, _ = run.require("train-seed")
    final = None
    for stage in ("qat-phase2", "qat-phase1", "morph"):
        if run.path(ARTIFACTS[stage]).exists():
            final = load_checkpoint(run.path(ARTIFACTS[stage]))
            break
    morph = run.read_json("morph.json")
    target = morph.get("target_bl")
    acc = {"seed": run.read_json("seed.json").get("accuracy")}
    base = report_row(f"{seed.arch} baseline", seed, run.macro, None, acc)
    rows = [base]
    plans = {"baseline": build_plan(seed, run.macro)}
    outputs = ["report.json", "report.csv", "mapping_baseline.png", "layer_bitlines.png", "curves.png"]
    if final is not None:
        stages = {"morph": morph.get("iterations", [{}])[-1].get("accuracy") if morph else None,
                  "phase1": run.read_json("phase1.json").get("accuracy"),
                  "phase2 start": run.read_json("phase2.json").get("start_accuracy"),
                  "phase2": run.read_json("phase2.json").get("accuracy")}
        row = report_row(f"{final.arch} adapted", final, run.macro, target,
                         {k: v for k, v in stages.items() if v is not None})
        rows.append(add_deltas(row, base))
        plans["adapted"] = build_plan(final, run.macro)
        plot_mapping(plans["adapted"], run.path("mapping_adapted.png"), "adapted")
        outputs.append("mapping_adapted.png")
    write_json(rows, run.path("report.json"))
    write_csv(rows, run.path("report.csv"))
    plot_mapping(plans["baseline"], run.path("mapping_baseline.png"), "baseline")
    plot_layer_bitlines(plans, run.path("layer_bitlines.png"))
    plot_curves({"seed": run.read_json("seed.json").get("loss", [])}, run.path("curves.png"))
    run.record("report", outputs)


def stage_pipeline(run: Run) -> None:
    for fn in (stage_train_seed, stage_morph, stage_phase1, stage_phase2, stage_map, stage_simulate, stage_report):
        fn(run)


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimadapt", description="CIM-aware model adaptation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config (merged over the built-in defaults)")
        p.add_argument("--seed", type=int, required=True, help="root RNG seed (u64)")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--scale", type=float, default=1.0, help="multiply every epoch count by this factor")
        p.add_argument("--power-of-two", action="store_true", help="export scales as power-of-two shifts")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            p.add_argument("--input", help="image tensor (.npy or raw little-endian float64, N x C x H x W)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if not 0 <= args.seed < 2 ** 64:
            raise StageError("--seed must be an unsigned 64-bit integer")
        if not args.scale > 0:
            raise StageError("--scale must be positive")
        run = Run(args)
        cmd = args.command
        if cmd == "simulate":
            stage_simulate(run, args.input)
        else:
            {"train-seed": stage_train_seed, "morph": stage_morph, "qat-phase1": stage_phase1,
             "qat-phase2": stage_phase2, "map": stage_map, "report": stage_report,
             "pipeline": stage_pipeline}[cmd](run)
    except Exception as exc:  # reported as JSON; the traceback is only useful with -v
        if args.verbose:
            log.exception("failed")
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, StageError) and exc.stage:
            err["run_first"] = exc.stage
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
