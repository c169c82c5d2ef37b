"""Comparison gates: conformal threshold on the top move probability, a linear
classifier over attention and move-probability features, and a classifier
supervised by the entropy of the move distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import CalibrationError, InputError
from .iv import IVConfig, UncertaintyDecision, decide, train_classifier
from .navigator import STOP, Gate, NavigatorOutput, StepContext, alpha_profile
from .nn import tensor as T

ALPHA_BINS = 16


# -- conformal threshold ----------------------------------------------------------

@dataclass(frozen=True)
class CPCalibration:
    threshold: float
    tolerance: float
    scores: tuple          # sorted top-probabilities of the incorrect calibration steps
    n_calib: int


def cp_calibrate(calib, tolerance: float = 0.9) -> CPCalibration:
    """Threshold so that moves scoring below it cover ``tolerance`` of the wrong moves.

    ``calib`` holds (β, correct) pairs.  With n wrong-move scores and
    k = ceil((n + 1)·tolerance), θ is the smallest calibration score strictly
    above the k-th smallest wrong-move score, i.e. the most permissive
    threshold that still rejects at least k of them.  When k > n (or nothing
    lies above) θ = 1.0.
    """
    calib = list(calib)
    if not calib:
        raise CalibrationError("empty calibration set")
    if not 0.0 <= tolerance <= 1.0:
        raise CalibrationError(f"tolerance must lie in [0, 1], got {tolerance}")
    top = np.array([float(np.max(b)) for b, _ in calib])
    wrong = np.sort(np.array([t for t, (_, ok) in zip(top, calib) if not ok]))
    n = len(wrong)
    k = math.ceil((n + 1) * tolerance)
    theta = 1.0
    if n and 0 < k <= n:
        above = top[top > wrong[k - 1]]
        theta = float(above.min()) if len(above) else 1.0
    elif k == 0:
        theta = float(top.min())
    return CPCalibration(min(theta, 1.0), tolerance, tuple(wrong.tolist()), len(calib))


def cp_decide(beta, calib: CPCalibration) -> bool:
    """True (uncertain) unless the top move probability reaches θ."""
    return not (float(np.max(beta)) >= calib.threshold)


class CPGate(Gate):
    name = "cp"

    def __init__(self, calib: CPCalibration):
        self.calib = calib

    def uncertain(self, ctx: StepContext) -> bool:
        return cp_decide(ctx.out.beta, self.calib)


# -- feature classifiers --------------------------------------------------------------

def pad_beta(beta, options, slots: int) -> np.ndarray:
    """[p_stop, candidate probabilities sorted descending, zero padding] of length ``slots``."""
    beta = np.asarray(beta, dtype=np.float64)
    if len(beta) > slots:
        raise InputError(f"{len(beta)} options exceed the padding bound {slots}")
    stop = [float(b) for b, o in zip(beta, options) if o == STOP]
    moves = sorted((float(b) for b, o in zip(beta, options) if o != STOP), reverse=True)
    out = np.zeros(slots)
    vals = stop + moves
    out[:len(vals)] = vals
    return out


def alpha_features(alpha, alpha_nhat) -> np.ndarray:
    """Node-averaged and proposed-node token-attention profiles, plus 1/L."""
    alpha = np.asarray(alpha)
    return np.concatenate([alpha_profile(alpha, ALPHA_BINS), alpha_profile(alpha_nhat, ALPHA_BINS),
                           [1.0 / alpha.shape[-1]]])


def base_features(alpha, alpha_nhat, beta, options, slots: int) -> np.ndarray:
    return np.concatenate([alpha_features(alpha, alpha_nhat), pad_beta(beta, options, slots)])


def normalised_entropy(beta) -> float:
    b = np.asarray(beta, dtype=np.float64)
    k = len(b)
    if k <= 1:
        return 0.0
    nz = b[b > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(k))


def entropy_label(beta, eps: float = 0.1) -> int:
    """1 when the move distribution is within ``eps`` of uniform in normalised entropy."""
    if not 0.0 <= eps <= 1.0:
        raise InputError(f"eps must lie in [0, 1], got {eps}")
    if len(beta) <= 1:
        return 0
    return int(normalised_entropy(beta) >= 1.0 - eps - 1e-12)


class LinearGateModel:
    """Two-class linear head over a fixed-width feature vector.

    Inputs are standardised with per-feature training statistics (``fit_scaler``);
    constant features keep unit scale so padding slots stay exactly zero.
    """

    def __init__(self, name: str, dim: int, seed: int = 0, store=None, mu=None, sd=None):
        self.name = name
        self.dim = dim
        self.mu = np.zeros(dim) if mu is None else np.asarray(mu, dtype=np.float64)
        self.sd = np.ones(dim) if sd is None else np.asarray(sd, dtype=np.float64)
        if store is None:
            rng = np.random.default_rng(seed)
            store = nn.ParamStore()
            store.add(f"{name}.W", nn.glorot(rng, (2, dim)))
            store.add(f"{name}.b", np.zeros(2))
        self.store = store

    def forward(self, feats, trainable=False) -> T.Tensor:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if feats.shape[-1] != self.dim:
            raise InputError(f"{self.name}: feature width {feats.shape[-1]} != {self.dim}")
        return nn.linear_forward((feats - self.mu) / self.sd, self.store.var(f"{self.name}.W", trainable),
                                 self.store.var(f"{self.name}.b", trainable))

    def fit_scaler(self, feats) -> None:
        F = np.asarray(feats, dtype=np.float64)
        sd = F.std(axis=0)
        const = sd < 1e-12
        self.mu = np.where(const, 0.0, F.mean(axis=0))
        self.sd = np.where(const, 1.0, sd)

    def score(self, feats) -> UncertaintyDecision:
        with nn.no_grad():
            s = self.forward(feats).data[0]
        z = np.exp(s - s.max())
        return UncertaintyDecision(s, decide(s), float(z[1] / z.sum()))

    def meta(self) -> dict:
        return {"kind": self.name, "dim": self.dim, "mu": self.mu.tolist(), "sd": self.sd.tolist()}


def train_linear_gate(model: LinearGateModel, feats, labels, cfg: IVConfig = IVConfig(), history=None):
    feats = [np.asarray(f) for f in feats]
    model.fit_scaler(feats)
    train_classifier(model.store, lambda b: model.forward(np.stack(b), trainable=True), feats,
                     np.asarray(labels, dtype=np.float64), cfg.iterations, cfg.batch_size, cfg.lr,
                     cfg.weight_decay, cfg.seed + 3, cfg.imbalance_ratio, history)
    return model


def _nhat_alpha(out: NavigatorOutput, ctx: StepContext):
    nh = ctx.state.current_node if out.n_hat == STOP else out.n_hat
    return out.alpha[out.row_of(nh)]


def f_base_score(alpha, alpha_nhat, beta, options, model: LinearGateModel, slots: int) -> UncertaintyDecision:
    return model.score(base_features(alpha, alpha_nhat, beta, options, slots))


def f_vdn_components(alpha, alpha_nhat, beta, eps: float, model: LinearGateModel):
    return model.score(alpha_features(alpha, alpha_nhat)), entropy_label(beta, eps)


class BaseGate(Gate):
    name = "base"

    def __init__(self, model: LinearGateModel, slots: int):
        self.model = model
        self.slots = slots

    def uncertain(self, ctx):
        o = ctx.out
        return f_base_score(o.alpha, _nhat_alpha(o, ctx), o.beta, o.options, self.model, self.slots).uncertain


class VDNGate(Gate):
    name = "vdn"

    def __init__(self, model: LinearGateModel, eps: float = 0.1):
        self.model = model
        self.eps = eps

    def uncertain(self, ctx):
        o = ctx.out
        return f_vdn_components(o.alpha, _nhat_alpha(o, ctx), o.beta, self.eps, self.model)[0].uncertain
