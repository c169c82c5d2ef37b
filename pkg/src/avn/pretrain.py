"""Relevance-span pre-training and attention-weight transfer.

Given Î and the encodings of the ground-truth path walked so far, the model
marks which instruction tokens describe the latest node:
R̂_t = sigmoid(head(BiLSTM(MHA(query=Î, kv=P_t)))).  Its attention block has
the same shape as the vagueness estimator's and seeds it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ContractViolation, DimensionError, InputError, TrainingError, TransferError, UnsupportedLabelingError
from .iv import IVConfig, IVModel, _pad
from .lang import Corpus, Episode
from .navigator import NavigatorModel, walk_gp
from .nn import tensor as T


@dataclass(frozen=True)
class PretrainConfig:
    model_dim: int = 32
    num_heads: int = 4
    hidden_dim: int = 16
    iterations: int = 7000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    smooth: float = 1.0
    val_fraction: float = 0.2
    threshold: float = 0.5
    residual: bool = True
    seed: int = 0


class PretrainModel:
    def __init__(self, cfg: PretrainConfig = PretrainConfig(), store=None):
        self.cfg = cfg
        self.mha = nn.MHAConfig(cfg.num_heads, cfg.model_dim)
        if store is None:
            rng = np.random.default_rng(cfg.seed)
            store = nn.ParamStore()
            nn.init_mha(store, "pre.mha", self.mha, rng)
            nn.init_birnn(store, "pre.rnn", cfg.model_dim, cfg.hidden_dim, rng)
            store.add("pre.head.W", nn.glorot(rng, (1, 2 * cfg.hidden_dim)))
            store.add("pre.head.b", np.zeros(1))
        self.store = store

    def meta(self) -> dict:
        return {"kind": "pretrain", "config": asdict(self.cfg)}


def pretrain_forward(Ihat, P, model: PretrainModel, q_mask=None, k_mask=None, trainable=False) -> T.Tensor:
    """Per-token relevance probabilities, (L,) or (B, L) for padded batches."""
    Ihat = np.asarray(Ihat, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    d = model.cfg.model_dim
    if Ihat.shape[-1] != d or P.shape[-1] != d:
        raise DimensionError(f"pretrain: Î {Ihat.shape} / path {P.shape} must have width {d}")
    if Ihat.shape[-2] < 1 or P.shape[-2] < 1:
        raise InputError("pretrain_forward needs at least one token and one path node")
    st = model.store
    att, _ = nn.multihead_attention(Ihat, P, st, model.mha, "pre.mha", k_mask, trainable)
    if model.cfg.residual:
        att = T.add(att, Ihat)
    lengths = None if q_mask is None else np.asarray(q_mask).sum(-1)
    h = nn.birnn_forward(att, st, model.cfg.hidden_dim, "pre.rnn", lengths, trainable)
    z = nn.linear_forward(h, st.var("pre.head.W", trainable), st.var("pre.head.b", trainable))
    return T.sigmoid(T.reshape(z, z.shape[:-1]))


def combined_loss(probs, labels, lambda_bce=1.0, lambda_dice=1.0, smooth=1.0, mask=None) -> T.Tensor:
    """λ_bce·BCE + λ_dice·Dice; ``mask`` excludes padded token positions from both."""
    probs = T.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise DimensionError(f"combined_loss: probs {probs.shape} vs labels {labels.shape}")
    if mask is None:
        bce = nn.bce_loss(probs, labels)
        dice = nn.dice_loss(probs, labels, smooth)
    else:
        m = np.asarray(mask, dtype=np.float64)
        bce = nn.bce_loss(probs, labels, weights=m)
        dice = nn.dice_loss(T.mul(probs, m), labels * m, smooth)
    total = T.mul(bce, lambda_bce)
    if lambda_dice:
        total = T.add(total, T.mul(dice, lambda_dice))
    return total


@dataclass
class RelevanceSample:
    episode_id: str
    t: int
    Ihat: np.ndarray
    path: np.ndarray
    target: np.ndarray
    spans: tuple = ()


def pretrain_samples(nav: NavigatorModel, corpus: Corpus, episodes) -> list[RelevanceSample]:
    """One sample per GP node: path so far (teacher forced) and the span of its sub-instruction."""
    out = []
    for ep in episodes:
        if not ep.rel_si:
            raise UnsupportedLabelingError(f"episode {ep.episode_id} has no alignment")
        for k, state, graph, o in walk_gp(nav, corpus.world(ep), ep):
            rows = o.G_hat[[o.row_of(u) for u in ep.gp[:k + 1]]]
            spans = tuple(ep.si_span(j) for j in range(len(ep.si)))
            out.append(RelevanceSample(ep.episode_id, k, o.Ihat, rows, ep.relevance(k), spans))
    return out


def split_episodes(episodes, fraction: float, seed: int):
    """Seeded (1 - fraction, fraction) split of episodes."""
    eps = list(episodes)
    perm = np.random.default_rng(seed).permutation(len(eps))
    n_val = int(round(fraction * len(eps)))
    val = set(perm[:n_val].tolist())
    return [e for i, e in enumerate(eps) if i not in val], [e for i, e in enumerate(eps) if i in val]


def _batch(model, samples, trainable):
    I, qm = _pad([s.Ihat for s in samples])
    P, km = _pad([s.path for s in samples])
    y = np.zeros(qm.shape)
    for i, s in enumerate(samples):
        y[i, :len(s.target)] = s.target
    return pretrain_forward(I, P, model, qm, km, trainable), y, qm


def predict(model: PretrainModel, samples, batch: int = 64) -> list[np.ndarray]:
    out = []
    with nn.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            p, _, qm = _batch(model, chunk, False)
            out += [p.data[j, :qm[j].sum()] for j in range(len(chunk))]
    return out


@dataclass
class PretrainResult:
    model: PretrainModel
    history: list
    val_f1: float
    exact_match: float
    monotone_fraction: float
    n_train: int
    n_val: int


def token_f1(preds, targets, threshold=0.5) -> float:
    tp = fp = fn = 0
    for p, y in zip(preds, targets):
        hat = p >= threshold
        tp += int((hat & (y > 0)).sum())
        fp += int((hat & (y == 0)).sum())
        fn += int((~hat & (y > 0)).sum())
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def span_centre(p: np.ndarray, threshold: float = 0.5) -> float:
    """Midpoint of the hull of tokens passing ``threshold`` (the argmax token when none do)."""
    idx = np.flatnonzero(p >= threshold)
    return 0.5 * float(idx[0] + idx[-1]) if len(idx) else float(np.argmax(p))


def predicted_chunk(p: np.ndarray, spans, threshold: float = 0.5) -> int:
    """Sub-instruction with the most above-threshold tokens (ties and empty predictions by mass)."""
    hat = p >= threshold
    key = [(int(hat[lo:hi].sum()), float(p[lo:hi].sum())) for lo, hi in spans]
    return max(range(len(spans)), key=lambda k: key[k])


def monotone_fraction(samples, preds, threshold: float = 0.5) -> float:
    """Share of episodes whose predicted sub-instruction never moves earlier as t grows."""
    by_ep: dict[str, list] = {}
    for s, p in zip(samples, preds):
        by_ep.setdefault(s.episode_id, []).append((s.t, predicted_chunk(p, s.spans, threshold)))
    ok = 0
    for rows in by_ep.values():
        c = [v for _, v in sorted(rows)]
        ok += all(b >= a for a, b in zip(c, c[1:]))
    return ok / max(len(by_ep), 1)


def train_pretrain(nav: NavigatorModel, corpus: Corpus, cfg: PretrainConfig = PretrainConfig(),
                   episodes=None) -> PretrainResult:
    episodes = list(corpus.splits["train"] if episodes is None else episodes)
    if not episodes:
        raise InputError("pretrain corpus is empty")
    fp = nav.fingerprint()
    tr_eps, va_eps = split_episodes(episodes, cfg.val_fraction, cfg.seed + 11)
    train = pretrain_samples(nav, corpus, tr_eps)
    val = pretrain_samples(nav, corpus, va_eps)
    model = PretrainModel(cfg)
    rng = np.random.default_rng(cfg.seed + 13)
    history = []
    last_good = model.store.copy()
    for it in range(cfg.iterations):
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        p, y, qm = _batch(model, [train[i] for i in idx], True)
        loss = combined_loss(p, y, cfg.lambda_bce, cfg.lambda_dice, cfg.smooth, qm)
        if not np.isfinite(loss.data):
            raise TrainingError(f"pretrain loss non-finite at iteration {it}", last_good)
        T.backward(loss)
        nn.adamw_step(model.store, cfg.lr, cfg.weight_decay)
        history.append(float(loss.data))
        if it % 500 == 499:
            last_good = model.store.copy()
    if nav.fingerprint() != fp:
        raise ContractViolation("navigator parameters changed during pre-training")
    preds = predict(model, val)
    targets = [s.target for s in val]
    exact = float(np.mean([np.array_equal(p >= cfg.threshold, y > 0) for p, y in zip(preds, targets)])) if val else 0.0
    return PretrainResult(model, history, token_f1(preds, targets, cfg.threshold), exact,
                          monotone_fraction(val, preds, cfg.threshold), len(train), len(val))


def transfer_mha(pre: PretrainModel, iv_cfg: IVConfig = IVConfig()) -> IVModel:
    """Fresh IV model whose attention weights are copies of the pre-trained ones."""
    iv = IVModel(iv_cfg)
    for part in ("wq", "wk", "wv", "wo"):
        src, dst = f"pre.mha.{part}", f"iv.mha.{part}"
        if src not in pre.store:
            raise TransferError(f"pre-trained model lacks {src}")
        if pre.store[src].shape != iv.store[dst].shape:
            raise TransferError(f"{src} shape {pre.store[src].shape} != {dst} shape {iv.store[dst].shape}")
        iv.store.params[dst][...] = pre.store[src]
    return iv
