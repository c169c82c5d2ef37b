import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from avn.baselines import (
    ALPHA_BINS, BaseGate, CPGate, LinearGateModel, VDNGate, alpha_features, base_features, cp_calibrate,
    cp_decide, entropy_label, f_base_score, normalised_entropy, pad_beta, train_linear_gate,
)
from avn.errors import CalibrationError, InputError
from avn.iv import IVConfig
from avn.navigator import STOP, rollout

probs = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
calib_sets = st.lists(st.tuples(probs, st.booleans()), min_size=1, max_size=40)


def as_calib(rows):
    # a two-option β whose top probability is max(p, 1-p)
    return [(np.array([p, 1.0 - p]), ok) for p, ok in rows]


def brute_theta(calib, tol):
    top = sorted({float(max(b)) for b, _ in calib})
    wrong = [float(max(b)) for b, ok in calib if not ok]
    k = math.ceil((len(wrong) + 1) * tol)
    if k == 0:
        return top[0]
    for c in top + [1.0]:
        if sum(w < c for w in wrong) >= k:
            return c
    return 1.0


def test_cp_all_confident_gives_one():
    calib = [(np.array([1.0, 0.0]), i % 2 == 0) for i in range(10)]
    assert cp_calibrate(calib, 0.9).threshold == 1.0


def test_cp_errors():
    with pytest.raises(CalibrationError):
        cp_calibrate([], 0.9)
    with pytest.raises(CalibrationError):
        cp_calibrate([(np.array([0.5, 0.5]), True)], 1.5)


def test_cp_small_example():
    # wrong scores 0.5, 0.6, 0.7, 0.8; k = ceil(5 * 0.5) = 3 → first score above 0.7
    calib = [(np.array([s, 1 - s]), False) for s in (0.5, 0.6, 0.7, 0.8)]
    calib += [(np.array([0.75, 0.25]), True), (np.array([0.95, 0.05]), True)]
    cp = cp_calibrate(calib, 0.5)
    assert cp.threshold == 0.75 and cp.n_calib == 6 and cp.scores == (0.5, 0.6, 0.7, 0.8)
    assert cp_decide(np.array([0.7, 0.3]), cp)
    assert not cp_decide(np.array([0.75, 0.25]), cp)
    assert not cp_decide(np.array([0.1, 0.9]), cp)


@given(calib_sets, st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=200, deadline=None)
def test_cp_matches_brute_force(rows, tol):
    calib = as_calib(rows)
    assert cp_calibrate(calib, tol).threshold == brute_theta(calib, tol)


@given(calib_sets, st.floats(min_value=0.05, max_value=0.95))
@settings(max_examples=200, deadline=None)
def test_cp_coverage_on_calibration_set(rows, tol):
    calib = as_calib(rows)
    wrong = [b for b, ok in calib if not ok]
    k = math.ceil((len(wrong) + 1) * tol)
    # coverage is only attainable when the k-th wrong score is below 1
    assume(wrong and k <= len(wrong) and sorted(max(b) for b in wrong)[k - 1] < 1.0)
    cp = cp_calibrate(calib, tol)
    flagged = np.mean([cp_decide(b, cp) for b in wrong])
    assert flagged >= tol


@given(calib_sets)
@settings(max_examples=50, deadline=None)
def test_cp_threshold_is_monotone_in_tolerance(rows):
    calib = as_calib(rows)
    th = [cp_calibrate(calib, t).threshold for t in np.linspace(0, 1, 11)]
    assert all(a <= b for a, b in zip(th, th[1:]))


def test_entropy_label_examples():
    assert entropy_label(np.full(4, 0.25)) == 1
    assert entropy_label(np.array([1.0, 0.0, 0.0])) == 0
    assert entropy_label(np.array([1.0])) == 0
    assert normalised_entropy(np.array([1.0])) == 0.0
    assert math.isclose(normalised_entropy(np.full(7, 1 / 7)), 1.0)
    assert entropy_label(np.array([0.8, 0.2]), 0.1) == 0   # H = 0.722
    assert entropy_label(np.array([0.6, 0.4]), 0.1) == 1   # H = 0.971
    with pytest.raises(InputError):
        entropy_label(np.full(2, 0.5), 2.0)


def _dist(xs):
    x = np.asarray(xs) + 1e-3
    return x / x.sum()


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8), st.randoms())
@settings(max_examples=100, deadline=None)
def test_entropy_permutation_invariant(xs, rnd):
    b = _dist(xs)
    perm = list(range(len(b)))
    rnd.shuffle(perm)
    assert math.isclose(normalised_entropy(b), normalised_entropy(b[perm]), abs_tol=1e-12)
    assert 0.0 <= normalised_entropy(b) <= 1.0 + 1e-12


@given(st.integers(2, 8), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_entropy_monotone_toward_uniform(k, a, b):
    # mixing toward uniform never lowers the entropy
    lo, hi = sorted((a, b))
    peak = np.zeros(k)
    peak[0] = 1.0
    u = np.full(k, 1.0 / k)
    h = lambda lam: normalised_entropy((1 - lam) * peak + lam * u)
    assert h(lo) <= h(hi) + 1e-12


def test_pad_beta():
    out = pad_beta([0.2, 0.5, 0.3], [4, 7, STOP], 5)
    assert np.array_equal(out, [0.3, 0.5, 0.2, 0.0, 0.0])
    with pytest.raises(InputError):
        pad_beta([0.5, 0.5], [1, STOP], 1)


def test_padding_contributes_nothing():
    m = LinearGateModel("base", 2 * ALPHA_BINS + 1 + 6, seed=1)
    W = m.store.params["base.W"]
    alpha = np.full((3, 4), 0.25)
    f = base_features(alpha, alpha[0], [0.6, 0.4], [2, STOP], 6)
    s1 = m.score(f).scores
    W[:, -3:] += 5.0      # padding slots carry zeros
    assert np.allclose(m.score(f).scores, s1, atol=1e-14)


def test_alpha_features_shape():
    f = alpha_features(np.full((2, 5), 0.2), np.full(5, 0.2))
    assert f.shape == (2 * ALPHA_BINS + 1,)
    assert math.isclose(f[:ALPHA_BINS].sum(), 1.0) and math.isclose(f[-1], 0.2)


def test_zero_weight_base_is_tie():
    m = LinearGateModel("base", 2 * ALPHA_BINS + 1 + 4)
    m.store.params["base.W"][...] = 0.0
    d = f_base_score(np.full((2, 3), 1 / 3), np.full(3, 1 / 3), [0.7, 0.3], [1, STOP], m, 4)
    assert d.uncertain and d.p_uncertain == 0.5


def test_scaler_and_separable_training():
    rng = np.random.default_rng(0)
    y = (np.arange(200) % 2).astype(float)
    X = rng.normal(size=(200, 3)) * [1e-3, 1.0, 0.0]
    X[:, 0] += 1e-3 * (2 * y - 1) * 3
    m = train_linear_gate(LinearGateModel("base", 3, seed=0), X, y, IVConfig(iterations=400, lr=1e-2))
    assert m.sd[2] == 1.0 and m.mu[2] == 0.0
    acc = np.mean([m.score(x).uncertain == bool(t) for x, t in zip(X, y)])
    assert acc > 0.95
    back = LinearGateModel("base", 3, store=m.store, mu=m.meta()["mu"], sd=m.meta()["sd"])
    assert np.array_equal(back.score(X[0]).scores, m.score(X[0]).scores)
    with pytest.raises(InputError):
        m.score(np.zeros(4))


def test_gates_are_interchangeable_in_rollout(trained):
    corpus, nav = trained
    slots = max(w.max_degree() for w in corpus.worlds.values()) + 1
    cp = cp_calibrate([(np.array([0.9, 0.1]), False), (np.array([0.6, 0.4]), False), (np.array([0.99, 0.01]), True)])
    gates = [CPGate(cp), BaseGate(LinearGateModel("base", 2 * ALPHA_BINS + 1 + slots), slots),
             VDNGate(LinearGateModel("vdn", 2 * ALPHA_BINS + 1))]
    for ep in corpus.splits["val_unseen"][:10]:
        for g in gates:
            tr = rollout(nav, corpus.world(ep), ep, g)
            assert tr.steps and tr.steps[-1].move == STOP or tr.truncated
            for s in tr.steps:
                if g.name == "cp":
                    assert s.uncertain == cp_decide(np.array(s.beta), cp)


def test_confidently_wrong_steps_exist(trained):
    # low entropy but wrong: the entropy label disagrees with the ground-truth one
    corpus, nav = trained
    steps = [s for ep in corpus.splits["val_unseen"] for s in rollout(nav, corpus.world(ep), ep).steps]
    lab = np.array([s.label_gp for s in steps])
    ent = np.array([entropy_label(s.beta, 0.1) for s in steps])
    assert lab.sum() > 0
    assert np.any((ent == 0) & (lab == 1))
    assert np.mean(ent != lab) > 0
