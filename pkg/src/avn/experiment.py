"""Experiment orchestration: train every component for one seed, run each gate
on the unseen-world test mix and aggregate the trajectories.

Everything a report contains under ``methods`` is a pure function of the
trajectories (see :func:`aggregate`), so reports can be rebuilt from
``trajectories.jsonl`` alone.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .baselines import (ALPHA_BINS, BaseGate, CPCalibration, CPGate, LinearGateModel, VDNGate, alpha_features,
                        base_features, cp_calibrate, entropy_label, train_linear_gate)
from .config import ExperimentConfig
from .errors import ConfigError
from .iv import IVGate, IVModel, StepSample, collect_samples, label_ip, labels_of, mean_loss, train_iv
from .lang import Corpus, build_corpus
from .metrics import balance, intervention_stats, mean_ne, precision_recall, spl
from .navigator import AlwaysAsk, NavigatorModel, NeverAsk, Trajectory, padding_width, rollout, train_navigator
from .pretrain import PretrainResult, train_pretrain, transfer_mha

log = logging.getLogger(__name__)

REPORT_SCHEMA = "avn-run-report"
REPORT_VERSION = 1
NEEDS = {
    "never": (), "always": (), "cp": ("cp",), "base": ("base",), "vdn": ("vdn",),
    "iv-gp": ("iv-gp",), "iv-gp+pretrain": ("iv-gp+pretrain",), "iv-ip": ("iv-ip",),
}


# -- seeding --------------------------------------------------------------------

def seeded(cfg: ExperimentConfig) -> ExperimentConfig:
    """Propagate the master seed into every component config."""
    s = cfg.seed
    return dataclasses.replace(
        cfg,
        nav=dataclasses.replace(cfg.nav, seed=s),
        iv=dataclasses.replace(cfg.iv, seed=s),
        pretrain=dataclasses.replace(cfg.pretrain, seed=s),
    )


def corpus_for(cfg: ExperimentConfig) -> Corpus:
    return build_corpus(cfg.seed, cfg.corpus, cfg.world, cfg.lang)


def split_steps(samples, fraction: float, seed: int):
    """Seeded step-level (train, calibration) split."""
    perm = np.random.default_rng(seed + 17).permutation(len(samples))
    n_cal = int(round(fraction * len(samples)))
    cal = set(perm[:n_cal].tolist())
    return ([s for i, s in enumerate(samples) if i not in cal],
            [s for i, s in enumerate(samples) if i in cal])


def gate_samples(nav: NavigatorModel, corpus: Corpus, cfg: ExperimentConfig):
    samples = collect_samples(nav, corpus, corpus.splits["val_seen"])
    return split_steps(samples, cfg.calib_fraction, cfg.seed)


# -- component training ---------------------------------------------------------------

def base_dim(slots: int) -> int:
    return 2 * ALPHA_BINS + 1 + slots


def train_base(samples: list[StepSample], cfg: ExperimentConfig, slots: int, history=None) -> LinearGateModel:
    feats = [base_features(s.alpha, s.alpha_nhat, s.beta, s.options, slots) for s in samples]
    model = LinearGateModel("base", base_dim(slots), cfg.seed)
    return train_linear_gate(model, feats, labels_of(samples, "gp"), cfg.iv, history)


def train_vdn(samples: list[StepSample], cfg: ExperimentConfig, history=None) -> LinearGateModel:
    feats = [alpha_features(s.alpha, s.alpha_nhat) for s in samples]
    y = [entropy_label(s.beta, cfg.vdn_eps) for s in samples]
    model = LinearGateModel("vdn", 2 * ALPHA_BINS + 1, cfg.seed)
    return train_linear_gate(model, feats, y, cfg.iv, history)


def calibrate(samples: list[StepSample], cfg: ExperimentConfig) -> CPCalibration:
    return cp_calibrate([(s.beta, s.correct) for s in samples], cfg.cp_tolerance)


def train_iv_variant(name: str, samples, cfg: ExperimentConfig, nav: NavigatorModel,
                     pre: PretrainResult | None = None) -> tuple[IVModel, dict]:
    scheme = "ip" if name == "iv-ip" else "gp"
    if name == "iv-gp+pretrain":
        if pre is None:
            raise ConfigError("iv-gp+pretrain needs a pre-trained relevance model")
        model = transfer_mha(pre.model, cfg.iv)
    else:
        model = IVModel(cfg.iv)
    before = mean_loss(model, samples, scheme)
    train_iv(model, samples, scheme, cfg.iv, navigator=nav)
    return model, {"scheme": scheme, "loss_initial": before, "loss_final": mean_loss(model, samples, scheme)}


@dataclass
class Pipeline:
    cfg: ExperimentConfig
    corpus: Corpus
    nav: NavigatorModel
    slots: int
    train_samples: list = field(default_factory=list)
    calib_samples: list = field(default_factory=list)
    pre: PretrainResult | None = None
    models: dict = field(default_factory=dict)
    cp: CPCalibration | None = None
    info: dict = field(default_factory=dict)


def prepare(cfg: ExperimentConfig) -> Pipeline:
    """Train the navigator and everything the configured gates need."""
    cfg = seeded(cfg)
    corpus = corpus_for(cfg)
    nav = train_navigator(corpus, cfg.nav)
    pipe = Pipeline(cfg, corpus, nav, padding_width(corpus))
    needed = {n for g in cfg.gates for n in NEEDS[g]}
    if not needed:
        return pipe
    pipe.train_samples, pipe.calib_samples = gate_samples(nav, corpus, cfg)
    tr = pipe.train_samples
    pipe.info["n_train_steps"] = len(tr)
    pipe.info["n_calib_steps"] = len(pipe.calib_samples)
    if "iv-gp+pretrain" in needed:
        pipe.pre = train_pretrain(nav, corpus, cfg.pretrain)
        pipe.info["pretrain"] = {"val_f1": pipe.pre.val_f1, "exact_match": pipe.pre.exact_match,
                                 "monotone_fraction": pipe.pre.monotone_fraction,
                                 "loss_initial": pipe.pre.history[0], "loss_final": pipe.pre.history[-1]}
    for name in ("iv-gp", "iv-gp+pretrain", "iv-ip"):
        if name in needed:
            pipe.models[name], pipe.info[name] = train_iv_variant(name, tr, cfg, nav, pipe.pre)
    if "base" in needed:
        pipe.models["base"] = train_base(tr, cfg, pipe.slots)
    if "vdn" in needed:
        pipe.models["vdn"] = train_vdn(tr, cfg)
    if "cp" in needed:
        pipe.cp = calibrate(pipe.calib_samples, cfg)
        pipe.info["cp_threshold"] = pipe.cp.threshold
    return pipe


def make_gate(name: str, models: dict, cp: CPCalibration | None, slots: int, eps: float):
    if name == "never":
        return NeverAsk()
    if name == "always":
        return AlwaysAsk()
    if name == "cp":
        if cp is None:
            raise ConfigError("gate 'cp' needs a calibration (calibrate-cp)")
        return CPGate(cp)
    if name not in models:
        raise ConfigError(f"gate {name!r} needs a trained model, none supplied")
    if name == "base":
        return BaseGate(models[name], slots)
    if name == "vdn":
        return VDNGate(models[name], eps)
    return IVGate(models[name], name)


# -- evaluation -----------------------------------------------------------------------

def evaluate(nav: NavigatorModel, corpus: Corpus, episodes, gate) -> list[Trajectory]:
    return [rollout(nav, corpus.world(ep), ep, gate, label_ip=label_ip) for ep in episodes]


def aggregate(trajectories, eps: float = 0.1) -> dict:
    """All trajectory-derived aggregates for one method."""
    steps = [s for t in trajectories for s in t.steps]
    dec = [s.uncertain for s in steps]
    lab = [s.label_gp for s in steps]
    p, r = precision_recall(dec, lab) if steps else (0.0, 0.0)
    stats = intervention_stats(trajectories)
    out = {
        "n_trajectories": len(trajectories),
        "n_steps": len(steps),
        "spl_pct": spl(trajectories),
        "ne_m": mean_ne(trajectories),
        "precision_pct": p,
        "recall_pct": r,
        "balance": balance(p, r),
        "orig_pct": stats["orig_pct"],
        "short_pct": stats["short_pct"],
        "histogram": {str(k): v for k, v in stats["histogram"].items()},
        "ask_rate": float(np.mean(dec)) if steps else 0.0,
        "entropy_disagreement": float(np.mean([entropy_label(s.beta, eps) != s.label_gp for s in steps]))
        if steps else 0.0,
        "styles": {},
    }
    for style in ("orig", "short"):
        ts = [t for t in trajectories if t.style == style]
        out["styles"][style] = {"n": len(ts), "spl_pct": spl(ts), "ne_m": mean_ne(ts)}
    return out


def style_probe(nav: NavigatorModel, corpus: Corpus) -> dict[str, list[Trajectory]]:
    """Ungated navigator on every unseen episode in both instruction styles (paired)."""
    eps = corpus.splits["val_unseen"]
    return {f"navigator-{st}": evaluate(nav, corpus, [e.with_style(st) for e in eps], NeverAsk())
            for st in ("orig", "short")}


def run_gates(pipe: Pipeline) -> dict[str, list[Trajectory]]:
    cfg = pipe.cfg
    test = pipe.corpus.splits["val_unseen"]
    out = {}
    for name in cfg.gates:
        gate = make_gate(name, pipe.models, pipe.cp, pipe.slots, cfg.vdn_eps)
        out[name] = evaluate(pipe.nav, pipe.corpus, test, gate)
        log.info("seed %d gate %s done", cfg.seed, name)
    return out


def build_report(cfg: ExperimentConfig, trajectories: dict[str, list[Trajectory]], info: dict | None = None) -> dict:
    """One seed's RunReport from its trajectories (plus training diagnostics)."""
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "methods": {m: aggregate(ts, cfg.vdn_eps) for m, ts in sorted(trajectories.items())},
        "training": info or {},
    }


def run_seed(cfg: ExperimentConfig) -> tuple[dict, dict[str, list[Trajectory]], Pipeline]:
    """Full pipeline for ``cfg.seed``: (report, trajectories by method, trained pipeline)."""
    pipe = prepare(cfg)
    trajs = run_gates(pipe)
    trajs.update(style_probe(pipe.nav, pipe.corpus))
    return build_report(pipe.cfg, trajs, pipe.info), trajs, pipe


SUMMARY_KEYS = ("spl_pct", "ne_m", "precision_pct", "recall_pct", "balance", "orig_pct", "short_pct",
                "entropy_disagreement", "ask_rate")


def median_summary(reports: list[dict]) -> dict:
    """Per-method median over seeds of the scalar aggregates.

    ``balance`` is recomputed from the median precision and recall so the row stays
    self-consistent; the median of the per-seed balances is kept as ``balance_seed_median``.
    """
    methods = sorted({m for r in reports for m in r["methods"]})
    out = {}
    for m in methods:
        rows = [r["methods"][m] for r in reports if m in r["methods"]]
        med = {k: float(np.median([row[k] for row in rows])) for k in SUMMARY_KEYS}
        med["balance_seed_median"] = med["balance"]
        med["balance"] = balance(med["precision_pct"], med["recall_pct"])
        for st in ("orig", "short"):
            med[f"spl_{st}_pct"] = float(np.median([row["styles"][st]["spl_pct"] for row in rows]))
            med[f"ne_{st}_m"] = float(np.median([row["styles"][st]["ne_m"] for row in rows]))
        out[m] = med
    return out


def run_experiment(cfg: ExperimentConfig, seeds=None) -> tuple[dict, dict]:
    """Run every seed; returns (combined report, {seed: trajectories by method})."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    if not seeds:
        raise ConfigError("no seeds given")
    runs, trajs = [], {}
    for s in seeds:
        rep, tr, _ = run_seed(dataclasses.replace(cfg, seed=int(s)))
        runs.append(rep)
        trajs[int(s)] = tr
    return combine(runs), trajs


def combine(runs: list[dict]) -> dict:
    first = runs[0]
    cfg = dict(first["config"])
    cfg.pop("seed", None)
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "seeds": [r["seed"] for r in runs],
        "config": cfg,
        "runs": runs,
        "median": median_summary(runs),
    }
