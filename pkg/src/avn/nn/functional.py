"""Differentiable building blocks used by every model in the package.

Shapes follow the row convention: a sequence of ``L`` vectors of width ``d``
is an ``(L, d)`` matrix; a leading batch axis ``(B, L, d)`` is accepted by
the attention and recurrence primitives, with padding described by boolean
masks (``True`` marks a real position).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError
from . import tensor as T
from .params import MHAConfig, ParamStore, glorot
from .tensor import Tensor, as_tensor

MASK_FILL = -1e30
BCE_EPS = 1e-7


def linear_forward(x, weight, bias=None) -> Tensor:
    """``y_row = weight @ x_row + bias`` with ``weight`` shaped ``(out, in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    y = T.matmul(x, T.transpose(weight))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        y = T.add(y, bias)
    return y


def softmax_rows(x) -> Tensor:
    return T.softmax(x, axis=-1)


def _key_bias(key_mask, ndim):
    """Additive logit bias broadcastable over (..., Lq, Lk) from a (..., Lk) mask."""
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL)
    return bias.reshape(bias.shape[:-1] + (1,) * (ndim - bias.ndim) + bias.shape[-1:])


def scaled_dot_attention(query, key, value, scale_dim: int, key_mask=None):
    """softmax(Q Kᵀ / √scale_dim) V.

    Returns ``(output, weights)`` where ``weights`` is the row-stochastic
    attention matrix as a plain array.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if query.shape[-1] != key.shape[-1]:
        raise DimensionError(f"attention: query shape {query.shape} vs key shape {key.shape}")
    if key.shape[-2] != value.shape[-2]:
        raise DimensionError(f"attention: key shape {key.shape} vs value shape {value.shape}")
    logits = T.mul(T.matmul(query, T.transpose(key, _swap_last(key.ndim))), 1.0 / math.sqrt(scale_dim))
    if key_mask is not None:
        logits = T.add(logits, _key_bias(key_mask, logits.ndim))
    w = T.softmax(logits, axis=-1)
    return T.matmul(w, value), w.data


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def init_mha(store: ParamStore, prefix: str, cfg: MHAConfig, rng: np.random.Generator) -> None:
    d = cfg.model_dim
    for part in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{part}", glorot(rng, (d, d)))


def _split_heads(x: Tensor, h: int) -> Tensor:
    lead, (L, d) = x.shape[:-2], x.shape[-2:]
    x = T.reshape(x, lead + (L, h, d // h))
    n = len(lead)
    return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead, (h, L, hd) = x.shape[:-3], x.shape[-3:]
    n = len(lead)
    x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, lead + (L, h * hd))


def multihead_attention(query_seq, kv_seq, params: ParamStore, cfg: MHAConfig, prefix: str,
                        key_mask=None, trainable: bool = True):
    """Concat(head_1..head_h) W^O with head_i = Attention(Q W_i^Q, KV W_i^K, KV W_i^V).

    Head ``i`` owns column block ``i`` of each ``d × d`` projection.  The
    logit scale is √head_dim.  Returns ``(output, weights)``; ``weights``
    is the head-averaged attention matrix (``..., Lq, Lk``) as an array.
    """
    query_seq, kv_seq = as_tensor(query_seq), as_tensor(kv_seq)
    d = cfg.model_dim
    if query_seq.shape[-1] != d or kv_seq.shape[-1] != d:
        raise DimensionError(
            f"multihead_attention: query {query_seq.shape} / kv {kv_seq.shape} must have width {d}")
    wq, wk, wv, wo = (params.var(f"{prefix}.{p}", trainable) for p in ("wq", "wk", "wv", "wo"))
    h = cfg.num_heads
    q = _split_heads(T.matmul(query_seq, wq), h)
    k = _split_heads(T.matmul(kv_seq, wk), h)
    v = _split_heads(T.matmul(kv_seq, wv), h)
    if key_mask is not None:
        key_mask = np.expand_dims(np.asarray(key_mask, dtype=bool), -2)  # broadcast over heads
    heads, w = scaled_dot_attention(q, k, v, cfg.head_dim, key_mask)
    return T.matmul(_merge_heads(heads), wo), w.mean(axis=-3)


# -- bidirectional LSTM -----------------------------------------------------

def init_birnn(store: ParamStore, prefix: str, input_dim: int, hidden_dim: int,
               rng: np.random.Generator) -> None:
    for direction in ("fw", "bw"):
        store.add(f"{prefix}.{direction}.W", glorot(rng, (4 * hidden_dim, input_dim)))
        store.add(f"{prefix}.{direction}.U", glorot(rng, (4 * hidden_dim, hidden_dim)))
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = 1.0  # forget-gate bias
        store.add(f"{prefix}.{direction}.b", b)


def _lstm_forward(x, mask, W, U, b):
    B, L, _ = x.shape
    H = U.shape[1]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, L, H))
    cache = []
    xw = x @ W.T + b
    for t in range(L):
        z = xw[:, t] + h @ U.T
        i = T.sigmoid_array(z[:, :H])
        f = T.sigmoid_array(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = T.sigmoid_array(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((h, c, i, f, g, o, tc))
        out[:, t] = h_new * mask[:, t, None]
        h, c = h_new, c_new
    return out, cache


def _lstm_backward(dout, x, mask, W, U, cache):
    B, L, _ = x.shape
    H = U.shape[1]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(W.shape[0])
    dx = np.zeros_like(x)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dz = np.empty((B, 4 * H))
    for t in reversed(range(L)):
        h_prev, c_prev, i, f, g, o, tc = cache[t]
        dh = dout[:, t] * mask[:, t, None] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = do * o * (1.0 - o)
        dc_next = dc * f
        dW += dz.T @ x[:, t]
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dx[:, t] = dz @ W
        dh_next = dz @ U
    return dx, dW, dU, db


def _reverse_index(lengths, L):
    """Per-row gather index reversing each sequence inside its own length."""
    s = np.arange(L)[None, :]
    lens = np.asarray(lengths)[:, None]
    return np.where(s < lens, lens - 1 - s, s)


def birnn_forward(seq, params: ParamStore, hidden_dim: int, prefix: str, lengths=None,
                  trainable: bool = True) -> Tensor:
    """Bidirectional LSTM; output ``(..., L, 2*hidden_dim)`` = forward ‖ backward states.

    ``seq`` is ``(L, d)`` or ``(B, L, d)``; ``lengths`` gives the real length
    of each batch row (padding is trailing).
    """
    seq = as_tensor(seq)
    unbatched = seq.ndim == 2
    x = seq.data[None] if unbatched else seq.data
    B, L, _ = x.shape
    if L == 0:
        raise ValueError("birnn_forward: empty sequence")
    lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
    if lengths.min() < 1:
        raise ValueError("birnn_forward: empty sequence in batch")
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
    names = [f"{prefix}.{d}.{p}" for d in ("fw", "bw") for p in ("W", "U", "b")]
    leaves = [params.var(n, trainable) for n in names]
    Wf, Uf, bf, Wb, Ub, bb = (p.data for p in leaves)
    if Wf.shape[1] != x.shape[2] or Uf.shape[1] != hidden_dim:
        raise DimensionError(f"birnn: input width {x.shape[2]} / hidden {hidden_dim} vs weights {Wf.shape}, {Uf.shape}")
    rev = _reverse_index(lengths, L)
    rows = np.arange(B)[:, None]
    x_rev = x[rows, rev]
    out_f, cache_f = _lstm_forward(x, mask, Wf, Uf, bf)
    out_b_rev, cache_b = _lstm_forward(x_rev, mask, Wb, Ub, bb)
    out_b = out_b_rev[rows, rev]
    out = np.concatenate([out_f, out_b], axis=-1)
    H = hidden_dim

    def bw(g):
        if unbatched:
            g = g[None]
        dx_f, dWf, dUf, dbf = _lstm_backward(g[..., :H], x, mask, Wf, Uf, cache_f)
        g_b_rev = g[..., H:][rows, rev]
        dx_br, dWb, dUb, dbb = _lstm_backward(g_b_rev, x_rev, mask, Wb, Ub, cache_b)
        dx_b = np.zeros_like(dx_br)
        np.add.at(dx_b, (np.broadcast_to(rows, rev.shape), rev), dx_br)
        dx = dx_f + dx_b
        return (dx[0] if unbatched else dx), dWf, dUf, dbf, dWb, dUb, dbb

    return T._node(out[0] if unbatched else out, (seq, *leaves), bw)


# -- losses -----------------------------------------------------------------

def _check_len(probs, labels, what):
    if probs.shape != labels.shape:
        raise DimensionError(f"{what}: probs shape {probs.shape} != labels shape {labels.shape}")


def bce_loss(probs, labels, eps: float = BCE_EPS, weights=None) -> Tensor:
    """Mean of −[y ln p + (1−y) ln(1−p)] with p clamped to [eps, 1−eps].

    ``weights`` (same shape as labels) turns the mean into a weighted mean.
    """
    probs = as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    _check_len(probs, y, "bce_loss")
    p = T.clip(probs, eps, 1.0 - eps)
    ll = T.add(T.mul(T.log(p), y), T.mul(T.log(T.add(1.0, T.neg(p))), 1.0 - y))
    if weights is None:
        return T.neg(T.tmean(ll))
    w = np.asarray(weights, dtype=np.float64)
    return T.neg(T.mul(T.tsum(T.mul(ll, w)), 1.0 / w.sum()))


def dice_loss(probs, labels, smooth: float = 1.0) -> Tensor:
    """1 − (2 Σ p·y + smooth) / (Σ p + Σ y + smooth), over the last axis.

    Batched input returns the mean over rows.
    """
    probs = as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    _check_len(probs, y, "dice_loss")
    inter = T.tsum(T.mul(probs, y), axis=-1)
    denom = T.add(T.tsum(probs, axis=-1), y.sum(axis=-1) + smooth)
    ratio = T.mul(T.add(T.mul(inter, 2.0), smooth), T.reciprocal(denom))
    return T.tmean(T.add(1.0, T.neg(ratio)))


def masked_cross_entropy(logits, target_index, mask) -> Tensor:
    """Mean negative log-likelihood of ``target_index`` per row over unmasked columns."""
    logits = T.add(logits, np.where(mask, 0.0, MASK_FILL))
    lp = T.log_softmax(logits, axis=-1)
    rows = np.arange(lp.shape[0])
    return T.neg(T.tmean(T.getitem(lp, (rows, np.asarray(target_index)))))
