import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avn.errors import DimensionError
from avn.metrics import balance, confusion, intervention_stats, mean_ne, precision_recall, spl, spl_terms
from avn.navigator import AlwaysAsk, NeverAsk, StepRecord, Trajectory, rollout


def traj(success=True, taken=2.0, shortest=1.0, ne=0.0, style="orig", asks=0):
    steps = [StepRecord(i, 0, [], [], [], 0, 0, True, 1, None, 0, True) for i in range(asks)]
    return Trajectory("e", style, 0, 1, [0], steps, stopped=True, success=success, path_length=taken,
                      shortest_length=shortest, ne=ne)


def test_spl_unit_cases():
    assert spl_terms([traj(taken=2.0, shortest=1.0)]) == [0.5]
    assert spl_terms([traj(success=False, taken=1.0)]) == [0.0]
    assert spl_terms([traj(taken=0.0, shortest=0.0)]) == [1.0]
    assert spl_terms([traj(taken=3.0, shortest=3.0)]) == [1.0]
    assert spl([traj(taken=2.0), traj(success=False), traj(taken=1.0)]) == pytest.approx(50.0)
    assert spl([]) == 0.0


def test_ne_mean():
    assert mean_ne([traj(ne=1.5), traj(ne=0.5)]) == 1.0
    assert mean_ne([]) == 0.0


def test_confusion_hand_tally():
    # TP=6, FP=2, FN=4, TN=8
    d = [1] * 6 + [1] * 2 + [0] * 4 + [0] * 8
    y = [1] * 6 + [0] * 2 + [1] * 4 + [0] * 8
    perm = np.random.default_rng(0).permutation(20)
    d, y = np.array(d)[perm], np.array(y)[perm]
    assert confusion(d, y) == (6, 2, 4, 8)
    p, r = precision_recall(d, y)
    assert p == 75.0 and r == 60.0
    assert math.isclose(balance(p, r), 15 / 135)
    with pytest.raises(DimensionError):
        confusion([1, 0], [1])


def test_zero_denominator_warns():
    with pytest.warns(UserWarning):
        assert precision_recall([0, 0, 0], [1, 0, 1]) == (0.0, 0.0)
    with pytest.warns(UserWarning):
        assert precision_recall([1, 1], [0, 0]) == (0.0, 0.0)


def test_balance_examples():
    assert abs(balance(72, 11.1455) - 0.7319) < 1e-4
    assert abs(balance(36.4791, 99.0147) - (-0.4615)) < 1e-4
    assert balance(0, 0) == 0.0
    assert balance(50, 50) == 0.0
    assert balance(100, 0) == 1.0 and balance(0, 100) == -1.0


@given(st.floats(0, 100), st.floats(0, 100))
@settings(max_examples=200)
def test_balance_antisymmetric_and_bounded(p, r):
    assert balance(p, r) == -balance(r, p)
    assert -1.0 <= balance(p, r) <= 1.0


@given(st.lists(st.tuples(st.integers(0, 6), st.sampled_from(["orig", "short"])), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_histogram_normalised(rows):
    trs = [traj(asks=a, style=s) for a, s in rows]
    st_ = intervention_stats(trs)
    assert abs(sum(st_["histogram"].values()) - 100.0) < 1e-9
    for style in ("orig", "short"):
        ts = [t for t in trs if t.style == style]
        want = 100.0 * sum(t.interventions > 0 for t in ts) / len(ts) if ts else 0.0
        assert st_[f"{style}_pct"] == want


def test_never_and_always_histograms(trained):
    corpus, nav = trained
    eps = corpus.splits["val_unseen"][:30]
    never = intervention_stats([rollout(nav, corpus.world(e), e, NeverAsk()) for e in eps])
    assert never["histogram"] == {0: 100.0}
    assert (never["orig_pct"], never["short_pct"]) == (0.0, 0.0)
    always = intervention_stats([rollout(nav, corpus.world(e), e, AlwaysAsk()) for e in eps])
    assert 0 not in always["histogram"]
    assert (always["orig_pct"], always["short_pct"]) == (100.0, 100.0)
