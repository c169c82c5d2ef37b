"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import StateError
from .params import ParamStore


def adamw_step(params: ParamStore, lr: float = 1e-3, weight_decay: float = 0.01,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               names=None) -> None:
    """One AdamW update over ``names`` (default: every parameter), then zero grads.

    The decay shrinks the weights directly (``p -= lr * wd * p``) rather than
    being folded into the gradient, so it never enters the moment estimates.
    """
    if not params.has_grads:
        raise StateError("adamw_step called with no populated gradients")
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in (params.params if names is None else names):
        p, g = params.params[n], params.grads[n]
        m, v = params.m[n], params.v[n]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()
