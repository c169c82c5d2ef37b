"""Named parameters, gradient slots, optimizer moments and checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError, StateError
from .tensor import Tensor

CHECKPOINT_FORMAT = "avn-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MHAConfig:
    num_heads: int = 4
    model_dim: int = 32

    def __post_init__(self):
        if self.num_heads < 1:
            raise DimensionError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.model_dim % self.num_heads:
            raise DimensionError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class ParamStore:
    """Float64 parameters with same-shape gradient and AdamW moment slots."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._touched: set[str] = set()

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise StateError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name]

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def var(self, name: str, trainable: bool = True) -> Tensor:
        """Leaf tensor over ``params[name]``; its gradient lands in ``grads[name]``."""
        if not trainable:
            return Tensor(self.params[name])
        return Tensor(self.params[name], requires_grad=True,
                      sink=lambda g, n=name: self.accumulate(n, g))

    def accumulate(self, name: str, grad) -> None:
        slot = self.grads[name]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != slot.shape:
            raise DimensionError(f"gradient shape {grad.shape} != parameter {name!r} shape {slot.shape}")
        slot += grad
        self._touched.add(name)

    @property
    def has_grads(self) -> bool:
        return bool(self._touched)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        self._touched.clear()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self.params.items():
            out.add(n, p.copy())
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            p = np.ascontiguousarray(self.params[n])
            h.update(n.encode())
            h.update(repr(p.shape).encode())
            h.update(p.tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())

    # -- serialisation ------------------------------------------------------

    def to_dict(self, meta: dict | None = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "meta": meta or {},
            "params": {
                n: {"shape": list(p.shape), "values": p.ravel().tolist()}
                for n, p in sorted(self.params.items())
            },
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ParamStore":
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a parameter checkpoint (format={blob.get('format')!r})")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {blob.get('version')!r}")
        store = cls()
        for n, entry in blob["params"].items():
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise DimensionError(f"parameter {n!r}: {values.size} values for shape {shape}")
            store.add(n, values.reshape(shape))
        return store


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(store.to_dict(meta)))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    return ParamStore.from_dict(blob), blob.get("meta", {})


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[-1], shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
