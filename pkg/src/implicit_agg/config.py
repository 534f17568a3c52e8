"""Flat ``key=value`` run configuration.

One file holds the backbone, aggregation, token-init and training settings
plus paths. Keys are the dataclass field names; unknown keys are rejected.
``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .aggregation import AggConfig
from .errors import ParseError
from .training import TrainConfig
from .vit import BackboneConfig


@dataclass
class InitConfig:
    sample_count: int = 64
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    init_seed: int = 0


@dataclass
class PathConfig:
    train_manifest: str = ""
    val_manifest: str = ""
    eval_manifest: str = ""
    out_dir: str = ""


SECTIONS = {
    "backbone": BackboneConfig,
    "agg": AggConfig,
    "init": InitConfig,
    "train": TrainConfig,
    "paths": PathConfig,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    agg: AggConfig = field(default_factory=AggConfig)
    init: InitConfig = field(default_factory=InitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    @classmethod
    def desk(cls) -> "RunConfig":
        """Desk-scale defaults used by the end-to-end experiment."""
        return cls(
            backbone=BackboneConfig.desk(),
            train=TrainConfig(
                places_per_batch=16, images_per_place=4, lr=3e-3,
                max_epochs=10, steps_per_epoch=24,
            ),
        )

    def to_items(self) -> list:
        out = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            out += [(f.name, getattr(obj, f.name)) for f in fields(obj)]
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def with_overrides(self, pairs: Iterable) -> "RunConfig":
        """New config with ``(key, raw string)`` pairs applied and re-validated."""
        owners = _key_owners()
        updates: dict = {sec: {} for sec in SECTIONS}
        for key, raw in pairs:
            if key not in owners:
                raise ParseError(f"unknown config key {key!r}")
            sec, typ = owners[key]
            updates[sec][key] = _parse_value(key, raw, typ)
        kwargs = {
            sec: dataclasses.replace(getattr(self, sec), **updates[sec]) for sec in SECTIONS
        }
        return RunConfig(**kwargs)


def _key_owners() -> dict:
    owners = {}
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            assert f.name not in owners, f"duplicate config key {f.name}"
            owners[f.name] = (sec, f.type)
    return owners


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str, typ):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    raw = raw.strip()
    try:
        if name == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ParseError(f"{key}: cannot parse {raw!r} as {name}") from None


def parse_pairs(text: str) -> list:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {line!r}", lineno)
        pairs.append((key.strip(), val))
    return pairs


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    return (base or RunConfig()).with_overrides(parse_pairs(text))


def load(path, base: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"), base)


def load_dataclass(cls, path=None, overrides: Iterable = ()):
    """Parse a ``key=value`` file (and overrides) into a single dataclass."""
    types = {f.name: f.type for f in fields(cls)}
    pairs = parse_pairs(Path(path).read_text(encoding="utf-8")) if path else []
    kwargs = {}
    for key, raw in list(pairs) + list(overrides):
        if key not in types:
            raise ParseError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _parse_value(key, raw, types[key])
    return cls(**kwargs)


def dump_dataclass(obj) -> str:
    return "".join(f"{f.name}={_fmt(getattr(obj, f.name))}\n" for f in fields(obj))
