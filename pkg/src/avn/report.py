"""Report emission and reloading.

report.json holds the full combined report, summary.csv one row per method
(median over seeds), histogram.csv the pooled asks-per-trajectory
distribution and trajectories.jsonl every rollout tagged with seed and method.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from collections import defaultdict
from pathlib import Path

import jsonschema

from .errors import ConfigError, InputError
from .lang import read_jsonl, write_jsonl
from .metrics import intervention_stats
from .navigator import StepRecord, Trajectory

SUMMARY_COLUMNS = ("method", "spl_pct", "ne_m", "precision_pct", "recall_pct", "balance", "orig_pct", "short_pct")

_pct = {"type": "number", "minimum": 0, "maximum": 100}
_METHOD = {
    "type": "object",
    "required": ["spl_pct", "ne_m", "precision_pct", "recall_pct", "balance", "orig_pct", "short_pct",
                 "histogram", "styles", "n_trajectories", "n_steps"],
    "properties": {
        "spl_pct": _pct, "precision_pct": _pct, "recall_pct": _pct, "orig_pct": _pct, "short_pct": _pct,
        "ne_m": {"type": "number", "minimum": 0},
        "balance": {"type": "number", "minimum": -1, "maximum": 1},
        "histogram": {"type": "object", "additionalProperties": _pct},
        "n_trajectories": {"type": "integer", "minimum": 0},
        "n_steps": {"type": "integer", "minimum": 0},
    },
}
_RUN = {
    "type": "object",
    "required": ["schema", "version", "seed", "config", "methods"],
    "properties": {
        "schema": {"const": "avn-run-report"},
        "version": {"const": 1},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "methods": {"type": "object", "additionalProperties": _METHOD},
        "training": {"type": "object"},
    },
}
REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema", "version", "seeds", "config", "runs", "median"],
    "properties": {
        "schema": {"const": "avn-run-report"},
        "version": {"const": 1},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "config": {"type": "object"},
        "runs": {"type": "array", "items": _RUN, "minItems": 1},
        "median": {"type": "object", "additionalProperties": {
            "type": "object",
            "properties": {"balance": {"type": "number", "minimum": -1, "maximum": 1},
                           "spl_pct": _pct, "orig_pct": _pct, "short_pct": _pct}}},
    },
}


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_JSON_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"report does not match the schema at {path}: {exc.message}") from exc


# -- trajectories ---------------------------------------------------------------------

def trajectory_to_dict(tr: Trajectory) -> dict:
    return dataclasses.asdict(tr)


def trajectory_from_dict(d: dict) -> Trajectory:
    d = dict(d)
    steps = [StepRecord(**s) for s in d.pop("steps")]
    return Trajectory(steps=steps, **d)


def write_trajectories(path, trajectories: dict) -> None:
    """``trajectories`` maps seed -> method -> list of Trajectory."""
    rows = []
    for seed in sorted(trajectories):
        for method in sorted(trajectories[seed]):
            for tr in trajectories[seed][method]:
                rows.append({"seed": int(seed), "method": method, "trajectory": trajectory_to_dict(tr)})
    write_jsonl(path, rows)


def read_trajectories(path) -> dict:
    out: dict = defaultdict(lambda: defaultdict(list))
    for row in read_jsonl(path):
        out[row["seed"]][row["method"]].append(trajectory_from_dict(row["trajectory"]))
    return {s: dict(m) for s, m in out.items()}


# -- emission --------------------------------------------------------------------------

def _num(x) -> str:
    return repr(float(x))


def emit_report(report: dict, trajectories: dict, out_dir) -> dict[str, Path]:
    validate_report(report)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / n for k, n in (("report", "report.json"), ("summary", "summary.csv"),
                                          ("histogram", "histogram.csv"), ("trajectories", "trajectories.jsonl"))}
        paths["report"].write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        with open(paths["summary"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_COLUMNS)
            for m, row in sorted(report["median"].items()):
                w.writerow([m] + [_num(row[c]) for c in SUMMARY_COLUMNS[1:]])
        with open(paths["histogram"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method", "interventions", "pct_trajectories"))
            pooled = defaultdict(list)
            for seed in sorted(trajectories):
                for m, ts in trajectories[seed].items():
                    pooled[m].extend(ts)
            for m in sorted(pooled):
                for k, v in intervention_stats(pooled[m])["histogram"].items():
                    w.writerow((m, k, _num(v)))
        write_trajectories(paths["trajectories"], trajectories)
    except OSError as exc:
        raise OSError(f"writing report to {out}: {exc}") from exc
    return paths


def load_report(out_dir) -> tuple[dict, dict]:
    d = Path(out_dir)
    missing = [n for n in ("report.json", "trajectories.jsonl") if not (d / n).exists()]
    if missing:
        raise ConfigError(f"report directory {d} is missing {', '.join(missing)}")
    report = json.loads((d / "report.json").read_text())
    validate_report(report)
    return report, read_trajectories(d / "trajectories.jsonl")


def recompute(report: dict, trajectories: dict) -> dict:
    """Rebuild the methods/median sections from trajectories alone."""
    from .config import build_config
    from .experiment import aggregate, median_summary

    runs = []
    for run in report["runs"]:
        eps = float(run["config"].get("vdn_eps", build_config().vdn_eps))
        trs = trajectories[run["seed"]]
        runs.append({**run, "methods": {m: aggregate(ts, eps) for m, ts in sorted(trs.items())}})
    return {**report, "runs": runs, "median": median_summary(runs)}
