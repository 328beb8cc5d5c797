"""Summary rows in the layout of the morphing results tables, plus CSV/JSON writers."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .config import MacroConfig, round_half_away
from .mapper import build_plan, plan_metrics
from .model import ModelGraph, param_count

COLUMNS = ("Model", "BL Constraint", "Param", "BLs", "MACs", "Macro Usage", "Partial-sum Storage",
           "Load Weight Latency", "Computing Latency")
# columns compared against the baseline as a percentage change
DELTA_COLUMNS = ("Param", "BLs", "MACs", "Partial-sum Storage", "Load Weight Latency", "Computing Latency")


def format_delta(new: float, base: float) -> str:
    """Relative change rendered like ``-79%`` (rounded half away from zero)."""
    if base == 0:
        return "n/a"
    pct = int(round_half_away((new - base) / base * 100.0))
    return f"{pct:+d}%"


def report_row(name: str, model: ModelGraph, macro: MacroConfig, target_bl: int | None = None,
               accuracies: dict | None = None) -> dict:
    plan = build_plan(model, macro)
    m = plan_metrics(plan, target_bl)
    row = {
        "Model": name,
        "BL Constraint": target_bl,
        "Param": param_count(model),
        "BLs": m["BLs"],
        "MACs": m["MACs"],
        "Macro Usage": m.get("Macro Usage"),
        "Partial-sum Storage": m["Partial-sum Storage"],
        "Load Weight Latency": m["Load Weight Latency"],
        "Computing Latency": m["Computing Latency"],
    }
    for stage, acc in (accuracies or {}).items():
        row[f"Acc {stage}"] = acc
    return row


def add_deltas(row: dict, baseline: dict) -> dict:
    out = dict(row)
    for col in DELTA_COLUMNS:
        if col in row and col in baseline and row[col] is not None and baseline[col] is not None:
            out[f"{col} delta"] = format_delta(row[col], baseline[col])
    # accuracy changes are absolute points, e.g. "+0.62%"
    if row.get("Acc morph") is not None and baseline.get("Acc seed") is not None:
        out["Acc morph delta"] = f"{row['Acc morph'] - baseline['Acc seed']:+.2f}%"
    return out


def write_json(rows: list[dict], path) -> None:
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=False) + "\n")


def write_csv(rows: list[dict], path) -> None:
    fields: list[str] = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if row.get(k) is None else row.get(k) for k in fields})
