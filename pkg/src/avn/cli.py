"""Command-line entry point (``avn``).

Every stage reads the same key-value config file (``--config``); flags and
``--set key=value`` override it.  Exit codes: 0 success, 2 configuration
error, 3 numeric or training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as X
from .baselines import CPCalibration, LinearGateModel
from .config import GATES, ExperimentConfig, dump_config, load_config
from .errors import (AVNError, CalibrationError, ConfigError, InputError, NumericError, TrainingError,
                     TransferError)
from .iv import IVConfig, IVModel
from .lang import Corpus, load_corpus, save_corpus
from .navigator import NavConfig, NavigatorModel
from .nn import load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, PretrainModel, PretrainResult, train_pretrain
from .report import emit_report, load_report, recompute
from .world import generate_world

log = logging.getLogger("avn")


# -- artifact loading -------------------------------------------------------------------

def _require(**paths):
    missing = [f"--{k.replace('_', '-')}" + (f" ({v})" if v else "") for k, v in paths.items()
               if v is None or not Path(v).exists()]
    if missing:
        raise ConfigError("missing artifacts: " + ", ".join(missing))


def load_navigator(path, corpus: Corpus) -> NavigatorModel:
    store, meta = load_checkpoint(path)
    if meta.get("kind") != "navigator":
        raise ConfigError(f"{path} is not a navigator checkpoint")
    if meta.get("vocab_seed") != corpus.vocab.seed or meta.get("vocab_dim") != corpus.vocab.dim:
        raise ConfigError(f"{path} was trained on a different vocabulary than the corpus")
    return NavigatorModel(corpus.vocab, meta["feature_dim"], NavConfig(**meta["config"]), store)


def load_model(path):
    store, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "iv":
        return IVModel(IVConfig(**meta["config"]), store)
    if kind == "pretrain":
        return PretrainModel(PretrainConfig(**meta["config"]), store)
    if kind in ("base", "vdn"):
        return LinearGateModel(kind, meta["dim"], store=store, mu=meta["mu"], sd=meta["sd"])
    raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")


def load_cp(path) -> CPCalibration:
    _require(cp=path)
    d = json.loads(Path(path).read_text())
    return CPCalibration(d["threshold"], d["tolerance"], tuple(d["scores"]), d["n_calib"])


def _stage(args):
    """Config plus the corpus and navigator named on the command line."""
    cfg = args.cfg
    _require(data=args.data, nav=args.nav)
    corpus = load_corpus(args.data)
    return cfg, corpus, load_navigator(args.nav, corpus)


# -- commands -------------------------------------------------------------------------------

def cmd_gen_world(args):
    w = generate_world(args.cfg.seed, args.cfg.world, f"s{args.cfg.seed}")
    _write_json(args.out, w.to_dict())


def cmd_gen_data(args):
    corpus = X.corpus_for(args.cfg)
    save_corpus(corpus, args.out)
    (Path(args.out) / "config.txt").write_text(dump_config(args.cfg))


def cmd_train_nav(args):
    cfg = args.cfg
    _require(data=args.data)
    corpus = load_corpus(args.data)
    nav = X.train_navigator(corpus, cfg.nav)
    save_checkpoint(args.out, nav.store, nav.meta())


def cmd_pretrain(args):
    cfg, corpus, nav = _stage(args)
    res = train_pretrain(nav, corpus, cfg.pretrain)
    meta = {**res.model.meta(), "val_f1": res.val_f1, "exact_match": res.exact_match,
            "monotone_fraction": res.monotone_fraction}
    save_checkpoint(args.out, res.model.store, meta)


def cmd_train_baseline(args):
    cfg, corpus, nav = _stage(args)
    train, _ = X.gate_samples(nav, corpus, cfg)
    if args.which == "base":
        model = X.train_base(train, cfg, X.padding_width(corpus))
    else:
        model = X.train_vdn(train, cfg)
    save_checkpoint(args.out, model.store, model.meta())


def cmd_calibrate_cp(args):
    cfg, corpus, nav = _stage(args)
    _, calib = X.gate_samples(nav, corpus, cfg)
    cp = X.calibrate(calib, cfg)
    _write_json(args.out, {"threshold": cp.threshold, "tolerance": cp.tolerance,
                           "scores": list(cp.scores), "n_calib": cp.n_calib})


def cmd_train_iv(args):
    cfg, corpus, nav = _stage(args)
    train, _ = X.gate_samples(nav, corpus, cfg)
    name = "iv-ip" if args.labels == "ip" else "iv-gp"
    pre = None
    if args.init == "pretrained":
        if args.labels != "gp":
            raise ConfigError("--init pretrained is only defined with --labels gp")
        _require(pretrained=args.pretrained)
        pm = load_model(args.pretrained)
        if not isinstance(pm, PretrainModel):
            raise TransferError(f"{args.pretrained} is not a pre-training checkpoint")
        pre = PretrainResult(pm, [], 0.0, 0.0, 0.0, 0, 0)
        name = "iv-gp+pretrain"
    model, info = X.train_iv_variant(name, train, cfg, nav, pre)
    save_checkpoint(args.out, model.store, {**model.meta(), **info, "variant": name})


def cmd_eval(args):
    cfg, corpus, nav = _stage(args)
    models, cp = {}, None
    if args.gate == "cp":
        cp = load_cp(args.cp)
    elif args.gate not in ("never", "always"):
        _require(model=args.model)
        models[args.gate] = load_model(args.model)
    gate = X.make_gate(args.gate, models, cp, X.padding_width(corpus), cfg.vdn_eps)
    trajs = {args.gate: X.evaluate(nav, corpus, corpus.splits["val_unseen"], gate)}
    rep = X.combine([X.build_report(cfg, trajs)])
    emit_report(rep, {cfg.seed: trajs}, args.out)


def cmd_report(args):
    """Merge eval/run directories into one report (rebuilt from trajectories)."""
    runs: dict[int, dict] = {}
    trajs: dict[int, dict] = {}
    for d in args.inputs:
        rep, tr = load_report(d)
        for run in rep["runs"]:
            s = run["seed"]
            if s in runs:
                runs[s]["training"].update(run.get("training", {}))
            else:
                runs[s] = {**run, "training": dict(run.get("training", {}))}
            for m, ts in tr.get(s, {}).items():
                trajs.setdefault(s, {})[m] = ts
    combined = X.combine([runs[s] for s in sorted(runs)])
    combined = recompute(combined, trajs)
    emit_report(combined, trajs, args.out)


def cmd_run(args):
    seeds = args.seeds if args.seeds else [args.cfg.seed]
    rep, trajs = X.run_experiment(args.cfg, seeds)
    emit_report(rep, trajs, args.out)
    for m, row in sorted(rep["median"].items()):
        print(f"{m:16s} SPL {row['spl_pct']:6.2f}  NE {row['ne_m']:5.2f}  P {row['precision_pct']:6.2f}  "
              f"R {row['recall_pct']:6.2f}  balance {row['balance']:+.4f}  "
              f"orig/short {row['orig_pct']:.0f}/{row['short_pct']:.0f}")


def _write_json(path, obj):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, sort_keys=True))


# -- parser -------------------------------------------------------------------------------

def _kv(s: str):
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected key=value, got {s!r}")
    k, v = s.split("=", 1)
    try:
        return k.strip(), json.loads(v)
    except json.JSONDecodeError:
        return k.strip(), v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set nav.epochs=4")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="avn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, *, data=False, nav=False, out_help="output path"):
        sp = sub.add_parser(name, parents=[common])
        if data:
            sp.add_argument("--data", help="corpus directory from gen-data")
        if nav:
            sp.add_argument("--nav", help="navigator checkpoint from train-nav")
        sp.add_argument("--out", required=True, help=out_help)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-world", cmd_gen_world, out_help="world JSON file")
    add("gen-data", cmd_gen_data, out_help="corpus directory")
    add("train-nav", cmd_train_nav, data=True, out_help="navigator checkpoint")
    add("pretrain", cmd_pretrain, data=True, nav=True, out_help="pre-training checkpoint")
    sp = add("train-baseline", cmd_train_baseline, data=True, nav=True, out_help="baseline checkpoint")
    sp.add_argument("--which", choices=("base", "vdn"), required=True)
    sp.add_argument("--eps", type=float, help="entropy threshold for vdn labels")
    sp = add("calibrate-cp", cmd_calibrate_cp, data=True, nav=True, out_help="calibration JSON")
    sp.add_argument("--tolerance", type=float)
    sp = add("train-iv", cmd_train_iv, data=True, nav=True, out_help="IV checkpoint")
    sp.add_argument("--labels", choices=("gp", "ip"), default="gp")
    sp.add_argument("--init", choices=("random", "pretrained"), default="random",
                    help="attention initialisation")
    sp.add_argument("--pretrained", help="pre-training checkpoint (with --init pretrained)")
    sp = add("eval", cmd_eval, data=True, nav=True, out_help="report directory")
    sp.add_argument("--gate", choices=GATES, required=True)
    sp.add_argument("--model", help="gate checkpoint (iv-*, base, vdn)")
    sp.add_argument("--cp", help="calibration JSON (cp)")
    sp.add_argument("--eps", type=float)
    sp = add("report", cmd_report, out_help="merged report directory")
    sp.add_argument("--inputs", nargs="+", required=True, help="eval or run output directories")
    sp = add("run", cmd_run, out_help="report directory")
    sp.add_argument("--seeds", type=int, nargs="*", help="seeds (default: the config seed)")
    return p


def resolve_config(args) -> ExperimentConfig:
    over = dict(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "tolerance", None) is not None:
        over["cp_tolerance"] = args.tolerance
    if getattr(args, "eps", None) is not None:
        over["vdn_eps"] = args.eps
    return X.seeded(load_config(args.config, over))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.cfg = resolve_config(args)
        args.fn(args)
    except (ConfigError, InputError, TransferError, FileNotFoundError) as exc:
        print(f"avn: configuration error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError, CalibrationError) as exc:
        print(f"avn: numeric error: {exc}", file=sys.stderr)
        return 3
    except AVNError as exc:
        print(f"avn: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
