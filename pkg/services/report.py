"""
Plot-ready CSV series from a finished run directory.

  reward_components.csv  one row per step
  consistency.csv        one row per evaluation checkpoint, one column per op, plus phi
  state_timeline.csv     one row per lifecycle transition
"""

import csv
import json
from pathlib import Path
from typing import Dict, List

from services.theory import potential_from_history
from utils.jsonl import read_jsonl

REQUIRED_FILES = ("manifest.json", "metrics.jsonl", "lifecycle.jsonl", "probes.jsonl")
REWARD_COLUMNS = ["step", "mean_r_acc", "mean_r_fmt", "mean_r_cons", "mean_total", "kl", "selected_op"]
TIMELINE_COLUMNS = ["step", "op_id", "from_state", "to_state", "consistency"]


class ReportInputError(ValueError):
    """Raised when a run directory is missing artifacts needed for the report."""


def _write_csv(path: Path, header: List[str], rows: List[List]) -> Path:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def build_report(run_dir: Path, out_dir: Path = None) -> Dict[str, Path]:
    """
    Raises:
        ReportInputError: run_dir missing or incomplete
        CorruptJournalError: a journal line does not parse (names the line)
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportInputError(f"{run_dir} is not a directory")
    missing = [name for name in REQUIRED_FILES if not (run_dir / name).exists()]
    if missing:
        raise ReportInputError(f"{run_dir} is missing {', '.join(missing)}")
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    tau = float(manifest.get("config", {}).get("pool", {}).get("tau", 0.75))

    metrics = read_jsonl(run_dir / "metrics.jsonl")
    lifecycle = read_jsonl(run_dir / "lifecycle.jsonl")
    probes = read_jsonl(run_dir / "probes.jsonl")

    outputs = {}
    outputs["reward_components"] = _write_csv(
        out_dir / "reward_components.csv",
        REWARD_COLUMNS,
        [["" if m.get(column) is None else m[column] for column in REWARD_COLUMNS] for m in metrics],
    )

    op_ids = sorted({p["op_id"] for p in probes})
    by_step: Dict[int, Dict[str, float]] = {}
    for p in probes:
        by_step.setdefault(int(p["step"]), {})[p["op_id"]] = p["consistency"]
    phi = dict(potential_from_history(probes, tau))
    outputs["consistency"] = _write_csv(
        out_dir / "consistency.csv",
        ["step"] + op_ids + ["phi"],
        [[step] + [values.get(op, "") for op in op_ids] + [phi[step]] for step, values in sorted(by_step.items())],
    )

    outputs["state_timeline"] = _write_csv(
        out_dir / "state_timeline.csv",
        TIMELINE_COLUMNS,
        [[entry[column] for column in TIMELINE_COLUMNS] for entry in lifecycle],
    )
    return outputs
