"""Experiment configuration: nested dataclasses addressed by flat dotted keys.

The on-disk form is a plain key-value file::

    # comments and blank lines are ignored
    seed = 3
    nav.epochs = 12
    cp.tolerance = 0.9
    gates = ["never", "always", "cp"]

Values are parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .iv import IVConfig
from .lang import CorpusConfig, LangConfig
from .navigator import NavConfig
from .pretrain import PretrainConfig
from .world import WorldConfig

GATES = ("never", "always", "cp", "base", "vdn", "iv-gp", "iv-gp+pretrain", "iv-ip")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    lang: LangConfig = field(default_factory=LangConfig)
    nav: NavConfig = field(default_factory=NavConfig)
    iv: IVConfig = field(default_factory=IVConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    cp_tolerance: float = 0.9
    vdn_eps: float = 0.1
    calib_fraction: float = 0.2
    gates: tuple = GATES

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_ALIASES = {"cp.tolerance": "cp_tolerance", "vdn.eps": "vdn_eps", "tolerance": "cp_tolerance"}


def _coerce(value, target, key):
    if isinstance(target, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(target, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(target, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(value)
    return value


def build_config(flat: dict | None = None) -> ExperimentConfig:
    """ExperimentConfig from flat dotted keys; unknown keys or bad values raise ConfigError."""
    cfg = ExperimentConfig()
    nested: dict[str, dict] = {}
    top: dict = {}
    for key, value in (flat or {}).items():
        key = _ALIASES.get(key, key)
        if "." in key:
            sect, name = key.split(".", 1)
            sub = getattr(cfg, sect, None)
            if not dataclasses.is_dataclass(sub) or name not in {f.name for f in dataclasses.fields(sub)}:
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(sect, {})[name] = _coerce(value, getattr(sub, name), key)
        else:
            if key not in {f.name for f in dataclasses.fields(cfg)} or dataclasses.is_dataclass(getattr(cfg, key)):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(value, getattr(cfg, key), key)
    subs = {s: dataclasses.replace(getattr(cfg, s), **v) for s, v in nested.items()}
    try:
        cfg = dataclasses.replace(cfg, **top, **subs)
        for g in cfg.gates:
            if g not in GATES:
                raise ConfigError(f"unknown gate {g!r}; expected one of {GATES}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    flat = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        flat = parse_kv(p.read_text(), str(p))
    flat.update(overrides or {})
    return build_config(flat)


def dump_config(cfg: ExperimentConfig) -> str:
    return "\n".join(f"{k} = {json.dumps(v)}" for k, v in sorted(cfg.to_flat().items())) + "\n"
