from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avn import nn
from avn.errors import ContractViolation, DimensionError, InputError, UnsupportedLabelingError
from avn.iv import (
    CandidatePath, IVConfig, IVGate, IVModel, StepSample, batch_scores, candidate_path, class_weights, decide,
    iv_forward, iv_score, label_gp, label_ip, labels_of, mean_loss, train_iv,
)
from avn.navigator import STOP, instruction_encoding, navigator_step, rollout, walk_gp
from avn.nn import tensor as T
from avn.world import AgentState, initial_graph

SMALL = IVConfig(model_dim=8, num_heads=2, seed=1)


def step_output(trained, k=0):
    corpus, nav = trained
    ep = corpus.splits["val_seen"][k]
    w = corpus.world(ep)
    state = AgentState.start(ep.start)
    out = navigator_step(nav, w, initial_graph(w, ep.start), state, instruction_encoding(nav, ep.instruction))
    return ep, state, out


def ref_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def ref_iv(params, Ihat, P, stop, heads):
    """Independent evaluation: per-head attention, concat, W^O, mean over tokens, linear."""
    P = P.copy()
    if stop:
        P[-1] = P[-1] + params["iv.marker"]
    d = Ihat.shape[1]
    hd = d // heads
    Q, K, V = Ihat @ params["iv.mha.wq"], P @ params["iv.mha.wk"], P @ params["iv.mha.wv"]
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        a = ref_softmax(Q[:, sl] @ K[:, sl].T / np.sqrt(hd))
        outs.append(a @ V[:, sl])
    att = np.concatenate(outs, axis=1) @ params["iv.mha.wo"]
    pooled = att.mean(axis=0)
    return params["iv.W"] @ pooled + params["iv.b"]


def test_candidate_path_rows_match_navigator(trained):
    ep, state, out = step_output(trained)
    for nh in out.options:
        cand = candidate_path(state.path, nh, out)
        assert cand.rows.shape == (len(state.path) + 1, out.G_hat.shape[1])
        assert cand.nodes[:-1] == state.path and cand.nodes[-1] == nh
        last = state.current_node if nh == STOP else nh
        assert np.array_equal(cand.rows[0], out.G_hat[out.row_of(ep.start)])
        assert np.array_equal(cand.rows[-1], out.G_hat[out.row_of(last)])
        assert cand.stop == (nh == STOP)


def test_candidate_path_rejects_non_navigable(trained):
    ep, state, out = step_output(trained)
    bad = next(u for u in range(100) if u not in out.options)
    with pytest.raises(ContractViolation):
        candidate_path(state.path, bad, out)


def test_candidate_rows_along_gp(trained):
    corpus, nav = trained
    ep = corpus.splits["val_seen"][3]
    for k, state, graph, out in walk_gp(nav, corpus.world(ep), ep):
        cand = candidate_path(state.path, out.n_hat, out)
        assert len(cand.rows) == k + 2
        for r, u in enumerate(state.path):
            assert np.array_equal(cand.rows[r], out.G_hat[out.row_of(u)])


def _model_with(W, b, cfg=SMALL):
    m = IVModel(cfg)
    m.store.params["iv.W"][...] = W
    m.store.params["iv.b"][...] = b
    return m


def _rand_cand(rng, n=2, d=8, stop=False):
    return CandidatePath(tuple(range(n)), rng.normal(size=(n, d)), stop)


def test_zero_classifier_tie_is_uncertain():
    rng = np.random.default_rng(0)
    m = _model_with(0.0, 0.0)
    dec = iv_score(rng.normal(size=(3, 8)), _rand_cand(rng), m)
    assert dec.scores[0] == dec.scores[1] and dec.uncertain and dec.p_uncertain == 0.5
    assert decide(np.array([1.0, 1.0])) and not decide(np.array([1.0, 0.999]))


def test_bias_domination():
    rng = np.random.default_rng(1)
    up, down = _model_with(0.0, [0.0, 10.0]), _model_with(0.0, [10.0, 0.0])
    for _ in range(20):
        I, c = rng.normal(size=(int(rng.integers(1, 6)), 8)), _rand_cand(rng, int(rng.integers(2, 5)))
        assert iv_score(I, c, up).uncertain
        assert not iv_score(I, c, down).uncertain


@pytest.mark.parametrize("stop", [False, True])
def test_matches_reference_evaluation(stop):
    rng = np.random.default_rng(2)
    m = IVModel(SMALL)
    m.store.params["iv.b"][...] = rng.normal(size=2)
    I, cand = rng.normal(size=(3, 8)), _rand_cand(rng, 2, stop=stop)
    ref = ref_iv(m.store.params, I, cand.rows, stop, 2)
    assert np.allclose(iv_score(I, cand, m).scores, ref, rtol=1e-12, atol=1e-13)


def test_padded_batch_matches_single():
    rng = np.random.default_rng(3)
    m = IVModel(SMALL)
    samples = []
    for L, n, stop in [(3, 2, False), (5, 4, True), (1, 2, False)]:
        samples.append(StepSample("e", "orig", rng.normal(size=(L, 8)), rng.normal(size=(n, 8)), stop, 0, 0,
                                  np.ones(1), [STOP], np.ones((1, L)), np.ones(L)))
    s = batch_scores(m, samples).data
    for i, smp in enumerate(samples):
        single = iv_score(smp.Ihat, CandidatePath((), smp.rows, smp.stop), m).scores
        assert np.allclose(s[i], single, atol=1e-12)


def test_dimension_mismatch():
    m = IVModel(SMALL)
    with pytest.raises(DimensionError):
        iv_forward(m, np.zeros((1, 3, 6)), np.zeros((1, 2, 8)), [False])
    with pytest.raises(InputError):
        IVModel(IVConfig(pooling="median"))


def test_gradient_check_bce_pipeline():
    rng = np.random.default_rng(4)
    m = IVModel(SMALL)
    m.store.params["iv.W"][...] = rng.normal(size=(2, 8))
    I = rng.normal(size=(2, 3, 8))
    P = rng.normal(size=(2, 2, 8))
    y = np.array([1.0, 0.0])

    def loss():
        s = iv_forward(m, I, P, [False, True], trainable=True)
        p = T.getitem(T.softmax(s, axis=-1), (slice(None), 1))
        return nn.bce_loss(p, y)

    assert nn.gradient_check(loss, m.store) < 1e-4


def test_gradient_check_max_pooling():
    rng = np.random.default_rng(5)
    m = IVModel(IVConfig(model_dim=8, num_heads=2, seed=2, pooling="max"))
    I, P = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 2, 8))
    assert nn.gradient_check(lambda: T.tsum(iv_forward(m, I, P, [False], trainable=True)), m.store) < 1e-4


def test_label_gp_examples():
    assert label_gp(5, 5) == 0
    assert label_gp(5, 7) == 1
    assert label_gp(STOP, STOP) == 0
    assert label_gp(STOP, 3) == 1


def test_label_ip_examples(trained):
    corpus, _ = trained
    ep = next(e for e in corpus.splits["val_seen"] if e.style == "short")
    orig = ep.with_style("orig")
    assert all(label_ip(orig, k) == 0 for k in range(len(ep.gp)))
    for k in range(len(ep.gp)):
        assert label_ip(ep, k) == int(ep.rel_si[k] in ep.dropped)
    assert label_ip(ep, len(ep.gp) - 1) == 0      # goal chunk is always kept
    assert any(label_ip(ep, k) for k in range(len(ep.gp)))
    with pytest.raises(UnsupportedLabelingError):
        label_ip(replace(ep, rel_si=()), 0)


@given(st.permutations(list(range(5))))
@settings(max_examples=25, deadline=None)
def test_mean_pooling_is_token_order_invariant(perm):
    rng = np.random.default_rng(6)
    m = IVModel(SMALL)
    m.store.params["iv.b"][...] = [0.3, -0.2]
    I, cand = rng.normal(size=(5, 8)), _rand_cand(rng, 3)
    a = iv_score(I, cand, m).scores
    b = iv_score(I[list(perm)], cand, m).scores
    assert np.allclose(a, b, atol=1e-12)


def test_separable_toy_reaches_full_accuracy():
    # label = whether the path rows point along +e0; the attended mean exposes it linearly
    rng = np.random.default_rng(7)
    cfg = IVConfig(model_dim=8, num_heads=2, seed=3, iterations=600, lr=1e-2)
    samples, y = [], []
    for i in range(80):
        lab = i % 2
        rows = rng.normal(scale=0.1, size=(2, 8))
        rows[:, 0] += 2.0 if lab else -2.0
        samples.append(StepSample(f"t{i}", "orig", rng.normal(size=(3, 8)), rows, False, lab, lab,
                                  np.ones(1), [STOP], np.ones((1, 3)), np.ones(3)))
        y.append(lab)
    m = train_iv(IVModel(cfg), samples, "gp", cfg)
    acc = np.mean([iv_score(s.Ihat, CandidatePath((), s.rows, False), m).uncertain == bool(l)
                   for s, l in zip(samples, y)])
    assert acc == 1.0


def test_class_weights():
    with pytest.warns(UserWarning):
        w = class_weights(np.ones(10), 9.0)
    assert np.array_equal(w, np.ones(10))
    assert class_weights(np.array([1.0, 0, 0, 0]), 9.0) is None
    y = np.array([1.0] + [0.0] * 19)
    with pytest.warns(UserWarning):
        w = class_weights(y, 9.0)
    assert np.isclose((w * y).sum(), (w * (1 - y)).sum())


def test_training_freezes_navigator_and_lowers_loss(trained, gate_samples):
    corpus, nav = trained
    fp = nav.fingerprint()
    res = {}
    for scheme in ("gp", "ip"):
        m = IVModel(IVConfig(seed=0))
        before = mean_loss(m, gate_samples, scheme)
        train_iv(m, gate_samples, scheme, navigator=nav)
        res[scheme] = (before, mean_loss(m, gate_samples, scheme))
    assert nav.fingerprint() == fp
    assert res["gp"][1] < 0.85 * res["gp"][0]
    assert res["ip"][1] < 0.7 * res["ip"][0]


def test_ip_model_asks_more_on_short(trained, gate_samples):
    corpus, nav = trained
    m = train_iv(IVModel(IVConfig(seed=0)), gate_samples, "ip", navigator=nav)
    gate = IVGate(m, "iv-ip")
    rate = {}
    for style in ("orig", "short"):
        eps = [e.with_style(style) for e in corpus.splits["val_seen"][:80]]
        trs = [rollout(nav, corpus.world(e), e, gate) for e in eps]
        steps = [s for t in trs for s in t.steps]
        rate[style] = np.mean([s.uncertain for s in steps])
    assert rate["short"] > rate["orig"]


def test_samples_cover_both_label_schemes(trained, gate_samples):
    corpus, _ = trained
    assert len(gate_samples) > 1000
    gp = labels_of(gate_samples, "gp")
    ip = labels_of(gate_samples, "ip")
    assert 0 < gp.mean() < 1 and 0 < ip.mean() < 1
    assert all(s.label_ip == 0 for s in gate_samples if s.style == "orig")
    with pytest.raises(InputError):
        labels_of(gate_samples, "entropy")
