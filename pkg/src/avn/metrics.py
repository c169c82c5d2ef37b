"""Navigation and gate-quality metrics."""

from __future__ import annotations

import warnings
from collections import Counter

import numpy as np

from .errors import DimensionError


def spl_terms(trajectories) -> list[float]:
    out = []
    for tr in trajectories:
        if not tr.success:
            out.append(0.0)
        elif tr.shortest_length == 0.0:
            out.append(1.0)
        else:
            out.append(tr.shortest_length / max(tr.path_length, tr.shortest_length))
    return out


def spl(trajectories) -> float:
    """Mean of success · shortest / max(taken, shortest), as a percentage."""
    terms = spl_terms(trajectories)
    return 100.0 * float(np.mean(terms)) if terms else 0.0


def ne(trajectory) -> float:
    return float(trajectory.ne)


def mean_ne(trajectories) -> float:
    return float(np.mean([t.ne for t in trajectories])) if trajectories else 0.0


def confusion(decisions, labels) -> tuple[int, int, int, int]:
    d = np.asarray(decisions, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    if d.shape != y.shape:
        raise DimensionError(f"decisions {d.shape} vs labels {y.shape}")
    return int((d & y).sum()), int((d & ~y).sum()), int((~d & y).sum()), int((~d & ~y).sum())


def precision_recall(decisions, labels) -> tuple[float, float]:
    """Precision and recall (percent) with "uncertain" as the positive class."""
    tp, fp, fn, _ = confusion(decisions, labels)
    if tp + fp == 0 or tp + fn == 0:
        warnings.warn("precision/recall denominator is zero; reporting 0")
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    return p, r


def balance(precision: float, recall: float) -> float:
    """(P - R) / (P + R); 0 when both are 0."""
    s = precision + recall
    return 0.0 if s == 0 else (precision - recall) / s


def intervention_stats(trajectories) -> dict:
    """Histogram of interventions per trajectory (% of trajectories) and per-style ask rates."""
    n = len(trajectories)
    counts = Counter(t.interventions for t in trajectories)
    hist = {int(k): 100.0 * v / n for k, v in sorted(counts.items())} if n else {}
    rates = {}
    for style in ("orig", "short"):
        ts = [t for t in trajectories if t.style == style]
        rates[style] = 100.0 * sum(t.interventions > 0 for t in ts) / len(ts) if ts else 0.0
    return {"histogram": hist, "orig_pct": rates["orig"], "short_pct": rates["short"]}
