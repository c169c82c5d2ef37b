"""Instruction-vagueness estimation.

The estimator attends from the encoded instruction Î to the candidate path
P̄_t = P_{t-1} + N̂_t (rows of the navigator's node encodings), mean-pools the
attended token rows and maps the pooled vector to two scores
(certain, uncertain).  Ties count as uncertain.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ContractViolation, DimensionError, InputError, TrainingError, UnsupportedLabelingError
from .lang import Corpus, Episode
from .navigator import (STOP, Gate, NavigatorModel, NavigatorOutput, OracleGate, StepContext,
                        gp_label_index, rollout)
from .nn import tensor as T

log = logging.getLogger(__name__)

CERTAIN, UNCERTAIN = 0, 1
POOLING = ("mean", "max")


@dataclass(frozen=True)
class IVConfig:
    model_dim: int = 32
    num_heads: int = 4
    iterations: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    pooling: str = "mean"
    seed: int = 0
    imbalance_ratio: float = 9.0


class IVModel:
    def __init__(self, cfg: IVConfig = IVConfig(), store=None):
        if cfg.pooling not in POOLING:
            raise InputError(f"unknown pooling {cfg.pooling!r}; expected one of {POOLING}")
        self.cfg = cfg
        self.mha = nn.MHAConfig(cfg.num_heads, cfg.model_dim)
        if store is None:
            store = nn.ParamStore()
            rng = np.random.default_rng(cfg.seed)
            nn.init_mha(store, "iv.mha", self.mha, rng)
            self.init_head(store, rng)
        self.store = store

    def init_head(self, store, rng):
        d = self.cfg.model_dim
        store.add("iv.W", nn.glorot(rng, (2, d)))
        store.add("iv.b", np.zeros(2))
        store.add("iv.marker", rng.normal(scale=0.1, size=d))

    def meta(self) -> dict:
        return {"kind": "iv", "config": asdict(self.cfg)}


@dataclass(frozen=True)
class CandidatePath:
    nodes: tuple
    rows: np.ndarray     # (|P_prev| + 1, d) rows of Ĝ_t; for stop the last row is the current node's
    stop: bool


@dataclass(frozen=True)
class UncertaintyDecision:
    scores: np.ndarray
    uncertain: bool
    p_uncertain: float
    label_gp: int | None = None
    label_ip: int | None = None


def candidate_path(P_prev, n_hat: int, out: NavigatorOutput) -> CandidatePath:
    P_prev = tuple(int(u) for u in P_prev)
    if n_hat != STOP and n_hat not in out.options:
        raise ContractViolation(f"proposed move {n_hat} is not navigable from {P_prev[-1]}")
    last = P_prev[-1] if n_hat == STOP else n_hat
    idx = [out.row_of(u) for u in P_prev] + [out.row_of(last)]
    return CandidatePath(P_prev + (n_hat,), out.G_hat[idx].copy(), n_hat == STOP)


def _stop_indicator(P_shape, lengths, stop):
    ind = np.zeros(P_shape[:-1] + (1,))
    for b, (n, s) in enumerate(zip(lengths, stop)):
        if s:
            ind[b, n - 1, 0] = 1.0
    return ind


def iv_forward(model: IVModel, Ihat, P, stop, q_mask=None, k_mask=None, trainable=False):
    """Scores (B, 2) for padded batches Î (B, L, d) and P̄ (B, Lp, d)."""
    Ihat = np.asarray(Ihat, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if Ihat.shape[-1] != model.cfg.model_dim or P.shape[-1] != model.cfg.model_dim:
        raise DimensionError(f"iv: Î {Ihat.shape} / path {P.shape} must have width {model.cfg.model_dim}")
    B, L, _ = Ihat.shape
    q_mask = np.ones((B, L), bool) if q_mask is None else np.asarray(q_mask, bool)
    k_mask = np.ones(P.shape[:2], bool) if k_mask is None else np.asarray(k_mask, bool)
    st = model.store
    ind = _stop_indicator(P.shape, k_mask.sum(1), stop)
    Pt = T.add(P, T.mul(ind, st.var("iv.marker", trainable)))
    att, _ = nn.multihead_attention(Ihat, Pt, st, model.mha, "iv.mha", k_mask, trainable)
    qm = q_mask[..., None].astype(np.float64)
    if model.cfg.pooling == "mean":
        pooled = T.mul(T.tsum(T.mul(att, qm), axis=1), 1.0 / q_mask.sum(1, keepdims=True))
    else:
        pooled = T.tmax(T.add(att, np.where(qm > 0, 0.0, nn.functional.MASK_FILL)), axis=1)
    return nn.linear_forward(pooled, st.var("iv.W", trainable), st.var("iv.b", trainable))


def decide(scores) -> bool:
    """Conservative rule: uncertain unless the certain score is strictly larger."""
    return bool(scores[UNCERTAIN] >= scores[CERTAIN])


def iv_score(Ihat, cand: CandidatePath, model: IVModel) -> UncertaintyDecision:
    with nn.no_grad():
        s = iv_forward(model, np.asarray(Ihat)[None], cand.rows[None], [cand.stop]).data[0]
    z = s - s.max()
    p = np.exp(z) / np.exp(z).sum()
    return UncertaintyDecision(s, decide(s), float(p[UNCERTAIN]))


def label_gp(n_hat: int, gt_move: int) -> int:
    return int(n_hat != gt_move)


def label_ip(ep: Episode, gp_index: int) -> int:
    if not ep.rel_si or len(ep.rel_si) != len(ep.gp):
        raise UnsupportedLabelingError(f"episode {ep.episode_id} has no sub-instruction alignment")
    if not 0 <= gp_index < len(ep.gp):
        raise InputError(f"gp_index {gp_index} outside path of {len(ep.gp)} nodes")
    return int(ep.rel_si[gp_index] in ep.active_dropped)


class IVGate(Gate):
    def __init__(self, model: IVModel, name: str = "iv"):
        self.model = model
        self.name = name

    def uncertain(self, ctx: StepContext) -> bool:
        cand = candidate_path(ctx.state.path, ctx.out.n_hat, ctx.out)
        return iv_score(ctx.out.Ihat, cand, self.model).uncertain


# -- samples ----------------------------------------------------------------------

@dataclass
class StepSample:
    """One decision point with every input a gate or baseline trains on."""

    episode_id: str
    style: str
    Ihat: np.ndarray
    rows: np.ndarray
    stop: bool
    label_gp: int
    label_ip: int
    beta: np.ndarray
    options: list
    alpha: np.ndarray
    alpha_nhat: np.ndarray
    correct: bool = field(init=False)

    def __post_init__(self):
        self.correct = not self.label_gp


def collect_samples(nav: NavigatorModel, corpus: Corpus, episodes) -> list[StepSample]:
    """Decision points along GP from the frozen navigator.

    The rollout runs free, with the oracle move injected whenever the navigator
    is wrong, so later steps stay on the ground-truth path and both label
    schemes are defined at every step.
    """
    samples: list[StepSample] = []
    gate = OracleGate()
    for ep in episodes:
        world = corpus.world(ep)

        def hook(ctx, rec, ep=ep):
            k = gp_label_index(ep, ctx.state)
            if k is None:
                raise ContractViolation("sample collection left the ground-truth path")
            out = ctx.out
            cand = candidate_path(ctx.state.path, out.n_hat, out)
            nh = ctx.state.current_node if out.n_hat == STOP else out.n_hat
            samples.append(StepSample(ep.episode_id, ep.style, out.Ihat, cand.rows, cand.stop,
                                      rec.label_gp, label_ip(ep, k), out.beta.copy(), list(out.options),
                                      out.alpha, out.alpha[out.row_of(nh)]))

        rollout(nav, world, ep, gate, on_step=hook)
    return samples


def _pad(arrs):
    n = max(a.shape[0] for a in arrs)
    out = np.zeros((len(arrs), n, arrs[0].shape[1]))
    mask = np.zeros((len(arrs), n), bool)
    for i, a in enumerate(arrs):
        out[i, :len(a)] = a
        mask[i, :len(a)] = True
    return out, mask


def batch_scores(model: IVModel, samples, trainable=False):
    I, qm = _pad([s.Ihat for s in samples])
    P, km = _pad([s.rows for s in samples])
    return iv_forward(model, I, P, [s.stop for s in samples], qm, km, trainable)


def class_weights(y: np.ndarray, ratio: float) -> np.ndarray | None:
    """Inverse-frequency weights when the majority/minority ratio exceeds ``ratio``."""
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n0 == 0 or n1 == 0:
        warnings.warn(f"degenerate label stream: all {len(y)} labels are {int(y[0])}")
        return np.ones(len(y))
    if max(n0, n1) / min(n0, n1) <= ratio:
        return None
    warnings.warn(f"label imbalance {n0}:{n1} exceeds {ratio}:1, using class-weighted loss")
    return np.where(y == 1, len(y) / (2 * n1), len(y) / (2 * n0))


def labels_of(samples, scheme: str) -> np.ndarray:
    if scheme not in ("gp", "ip"):
        raise InputError(f"unknown label scheme {scheme!r}")
    return np.array([s.label_gp if scheme == "gp" else s.label_ip for s in samples], dtype=np.float64)


def train_classifier(store: nn.ParamStore, forward, samples, y, iterations, batch_size, lr, weight_decay,
                     seed, ratio, history=None):
    """Shared minibatch loop: BCE of softmax(scores)[uncertain] against ``y``."""
    if not samples:
        raise InputError("training set is empty")
    w = class_weights(y, ratio)
    rng = np.random.default_rng(seed)
    last_good = store.copy()
    for it in range(iterations):
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        scores = forward([samples[i] for i in idx])
        p = T.getitem(T.softmax(scores, axis=-1), (slice(None), UNCERTAIN))
        loss = nn.bce_loss(p, y[idx], weights=None if w is None else w[idx])
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss at iteration {it}", last_good)
        T.backward(loss)
        nn.adamw_step(store, lr, weight_decay)
        if history is not None:
            history.append(float(loss.data))
        if it % 100 == 99:
            last_good = store.copy()
    return store


def train_iv(model: IVModel, samples, scheme: str = "gp", cfg: IVConfig | None = None,
             navigator: NavigatorModel | None = None, history=None) -> IVModel:
    cfg = cfg or model.cfg
    fp = navigator.fingerprint() if navigator is not None else None
    y = labels_of(samples, scheme)
    train_classifier(model.store, lambda b: batch_scores(model, b, trainable=True), samples, y,
                     cfg.iterations, cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.seed + 7,
                     cfg.imbalance_ratio, history)
    if navigator is not None and navigator.fingerprint() != fp:
        raise ContractViolation("navigator parameters changed during IV training")
    return model


def mean_loss(model: IVModel, samples, scheme: str) -> float:
    y = labels_of(samples, scheme)
    with nn.no_grad():
        s = batch_scores(model, samples)
        p = T.getitem(T.softmax(s, axis=-1), (slice(None), UNCERTAIN))
        return float(nn.bce_loss(p, y).data)
