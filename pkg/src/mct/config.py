"""Experiment configuration: one JSON file resolves every knob of a run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .train import Schedule


class ConfigError(ValueError):
    pass


def _pretrain_default() -> Schedule:
    return Schedule(epochs=100, batch=64, lr=1e-3, weight_decay=1e-4)


def _train_default() -> Schedule:
    return Schedule(epochs=300, batch=64, lr=1e-3, weight_decay=1e-4)


@dataclass
class ExperimentConfig:
    cube: str = ""
    gt: str = ""
    split: str | None = None
    per_class: int = 5
    # MceConfig fields except ``bands``, which comes from the cube
    mce: dict = field(default_factory=lambda: {"patch": 9, "groups": 4, "ks": 7, "ss": 2, "c1": 8, "c2": 16,
                                               "d_model": 64, "iie_enabled": True})
    encoder: dict = field(default_factory=lambda: {"depth": 3, "heads": 4, "d_ff": None, "dropout": 0.1})
    head_hidden: int | None = None
    pretrain: Schedule = field(default_factory=_pretrain_default)
    train: Schedule = field(default_factory=_train_default)
    zero_center: bool = False
    transfer: str = "none"
    pretrain_checkpoint: str | None = None
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    deterministic: bool = True
    out: str = "runs/default"
    map_mode: str = "labeled"
    reference: str | None = None
    eval_batch: int = 256

    def validate(self) -> "ExperimentConfig":
        if self.transfer not in ("none", "full", "partial"):
            raise ConfigError(f"transfer must be none, full or partial, got {self.transfer!r}")
        if self.map_mode not in ("labeled", "full"):
            raise ConfigError(f"map_mode must be labeled or full, got {self.map_mode!r}")
        if self.per_class < 1:
            raise ConfigError("per_class must be positive")
        if "bands" in self.mce:
            raise ConfigError("mce.bands is taken from the cube; remove it from the config")
        if "d_model" in self.encoder:
            raise ConfigError("encoder.d_model follows mce.d_model; remove it from the config")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        base = cls()
        for key in ("pretrain", "train"):
            if key in d:
                try:
                    d[key] = Schedule(**{**asdict(getattr(base, key)), **d[key]})
                except TypeError as exc:
                    raise ConfigError(f"bad {key} schedule: {exc}") from None
        for key in ("mce", "encoder"):
            if key in d:
                d[key] = {**getattr(base, key), **d[key]}
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        cfg = cls.from_dict(raw)
        base = Path(path).parent
        for key in ("cube", "gt", "split", "pretrain_checkpoint"):
            val = getattr(cfg, key)
            if val and not Path(val).is_absolute():
                setattr(cfg, key, str(base / val))
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
