"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .params import ParamStore
from .tensor import backward, no_grad


def gradient_check(loss_fn, params: ParamStore, h: float = 1e-5, names=None) -> float:
    """Max over parameter entries of |analytic − numeric| / max(1, |analytic|, |numeric|).

    ``loss_fn()`` must rebuild the forward pass from ``params`` and return a
    scalar tensor; it is evaluated once with the tape and twice per entry
    without it.
    """
    names = list(params.params) if names is None else list(names)
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss {loss.data!r}")
    backward(loss)
    analytic = {n: params.grads[n].copy() for n in names}
    params.zero_grad()
    worst = 0.0
    with no_grad():
        for n in names:
            p = params.params[n]
            flat = p.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"non-finite loss while perturbing {n}[{i}]")
                num = (up - down) / (2.0 * h)
                a = analytic[n].reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
