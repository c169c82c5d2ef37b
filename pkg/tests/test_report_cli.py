import csv
import json

import numpy as np
import pytest

from avn.cli import main
from avn.config import ExperimentConfig, build_config, dump_config, load_config, parse_kv
from avn.errors import ConfigError, InputError
from avn.metrics import balance
from avn.report import SUMMARY_COLUMNS, load_report, read_trajectories, recompute, validate_report

TINY_CFG = """\
# small end-to-end configuration
corpus.n_train_worlds = 6
corpus.n_unseen_worlds = 2
corpus.train_episodes = 60
corpus.val_seen_episodes = 40
corpus.val_unseen_episodes = 20
nav.epochs = 2
iv.iterations = 30
pretrain.iterations = 30
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


@pytest.fixture(scope="module")
def runs(cfg_file, tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    out = []
    for i in range(2):
        d = base / f"r{i}"
        assert main(["run", "--config", str(cfg_file), "--seeds", "0", "1", "--out", str(d)]) == 0
        out.append(d)
    return out


def test_run_is_bit_identical(runs):
    a, b = ((d / "report.json").read_bytes() for d in runs)
    assert a == b
    assert (runs[0] / "summary.csv").read_bytes() == (runs[1] / "summary.csv").read_bytes()


def test_summary_columns_and_balance(runs):
    with open(runs[0] / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    methods = {r[0] for r in rows[1:]}
    assert {"never", "always", "cp", "base", "vdn", "iv-gp", "iv-gp+pretrain", "iv-ip"} <= methods
    for r in rows[1:]:
        p, rc, bal = float(r[3]), float(r[4]), float(r[5])
        assert abs(balance(p, rc) - bal) < 1e-4
        assert all(0 <= float(r[i]) <= 100 for i in (1, 3, 4, 6, 7))


def test_histogram_csv_sums_to_100(runs):
    with open(runs[0] / "histogram.csv") as fh:
        rows = list(csv.DictReader(fh))
    tot = {}
    for r in rows:
        tot[r["method"]] = tot.get(r["method"], 0.0) + float(r["pct_trajectories"])
    assert all(abs(v - 100.0) < 1e-9 for v in tot.values())
    assert {r["interventions"] for r in rows if r["method"] == "never"} == {"0"}


def test_report_recomputable_from_trajectories(runs):
    rep, trajs = load_report(runs[0])
    assert sorted(trajs) == [0, 1]
    again = recompute(rep, trajs)
    assert json.dumps(again, sort_keys=True) == json.dumps(rep, sort_keys=True)
    always = trajs[0]["always"]
    assert all(t.success and t.ne == 0.0 for t in always)


def test_report_merges_eval_dirs(runs, tmp_path):
    assert main(["report", "--inputs", str(runs[0]), "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "report.json").read_bytes() == (runs[0] / "report.json").read_bytes()


def test_schema_rejects_bad_report(runs):
    rep, _ = load_report(runs[0])
    validate_report(rep)
    bad = json.loads(json.dumps(rep))
    bad["median"]["cp"]["balance"] = 1.5
    with pytest.raises(InputError):
        validate_report(bad)
    bad = json.loads(json.dumps(rep))
    bad["runs"][0]["methods"]["cp"]["spl_pct"] = 101.0
    with pytest.raises(InputError):
        validate_report(bad)


def test_staged_cli_chain(cfg_file, tmp_path):
    c = ["--config", str(cfg_file)]
    d, nav = str(tmp_path / "data"), str(tmp_path / "nav.json")
    stage = ["--data", d, "--nav", nav]
    assert main(["gen-world", *c, "--out", str(tmp_path / "w.json")]) == 0
    assert main(["gen-data", *c, "--out", d]) == 0
    assert main(["train-nav", *c, "--data", d, "--out", nav]) == 0
    assert main(["pretrain", *c, *stage, "--out", str(tmp_path / "pre.json")]) == 0
    assert main(["train-baseline", *c, *stage, "--which", "base", "--out", str(tmp_path / "base.json")]) == 0
    assert main(["calibrate-cp", *c, *stage, "--tolerance", "0.9", "--out", str(tmp_path / "cp.json")]) == 0
    assert main(["train-iv", *c, *stage, "--labels", "gp", "--init", "pretrained",
                 "--pretrained", str(tmp_path / "pre.json"), "--out", str(tmp_path / "ivp.json")]) == 0
    assert main(["train-iv", *c, *stage, "--labels", "ip", "--out", str(tmp_path / "ivip.json")]) == 0
    evals = {"never": [], "cp": ["--cp", str(tmp_path / "cp.json")],
             "base": ["--model", str(tmp_path / "base.json")],
             "iv-gp+pretrain": ["--model", str(tmp_path / "ivp.json")],
             "iv-ip": ["--model", str(tmp_path / "ivip.json")]}
    dirs = []
    for gate, extra in evals.items():
        out = str(tmp_path / f"e-{gate}")
        assert main(["eval", *c, *stage, "--gate", gate, *extra, "--out", out]) == 0
        dirs.append(out)
    assert main(["report", "--inputs", *dirs, "--out", str(tmp_path / "merged")]) == 0
    rep, trajs = load_report(tmp_path / "merged")
    assert set(rep["median"]) == set(evals)
    assert (tmp_path / "data" / "config.txt").exists()
    # a loaded config reproduces the one written next to the corpus
    assert dump_config(load_config(tmp_path / "data" / "config.txt")) == (tmp_path / "data" / "config.txt").read_text()


def test_exit_codes(cfg_file, tmp_path):
    c = ["--config", str(cfg_file)]
    assert main(["eval", *c, "--data", str(tmp_path / "nope"), "--nav", "x", "--gate", "never",
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", *c, "--set", "nav.nonsense=3", "--out", str(tmp_path / "o")]) == 2
    assert main(["run", *c, "--set", "corpus.train_episodes=abc", "--out", str(tmp_path / "o")]) == 2
    d = str(tmp_path / "data")
    assert main(["gen-data", *c, "--out", d]) == 0
    assert main(["train-nav", *c, "--data", d, "--set", "nav.lr=1e300", "--out", str(tmp_path / "n.json")]) == 3
    assert main(["train-nav", *c, "--data", d, "--out", str(tmp_path / "n.json")]) == 0
    stage = ["--data", d, "--nav", str(tmp_path / "n.json")]
    assert main(["eval", *c, *stage, "--gate", "iv-gp", "--out", str(tmp_path / "o")]) == 2
    assert main(["calibrate-cp", *c, *stage, "--tolerance", "1.5", "--out", str(tmp_path / "cp.json")]) == 3


def test_config_parsing(tmp_path):
    flat = parse_kv("a = 1\n# comment\nb = hello  # trailing\nc = [1, 2]\n")
    assert flat == {"a": 1, "b": "hello", "c": [1, 2]}
    with pytest.raises(ConfigError):
        parse_kv("no equals sign here")
    cfg = build_config({"cp.tolerance": 0.8, "nav.epochs": 3, "gates": "never,cp"})
    assert cfg.cp_tolerance == 0.8 and cfg.nav.epochs == 3 and cfg.gates == ("never", "cp")
    with pytest.raises(ConfigError):
        build_config({"gates": "never,oracle"})
    with pytest.raises(ConfigError):
        build_config({"nav.epochs": 2.5})
    with pytest.raises(ConfigError):
        build_config({"pretrain.residual": "maybe"})
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(ExperimentConfig()))
    assert load_config(p) == ExperimentConfig()
    assert load_config(p, {"seed": 4}).seed == 4


def test_trajectory_roundtrip(runs):
    trajs = read_trajectories(runs[0] / "trajectories.jsonl")
    t = trajs[1]["cp"][0]
    assert isinstance(t.steps[0].beta, list) and np.isclose(sum(t.steps[0].beta), 1.0)
