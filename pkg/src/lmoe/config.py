"""Run configuration files: JSON, validated field by field before anything is built."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import TASKS
from .errors import ConfigError
from .model import ExpertConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a path to .txt / .jsonl
    tasks: list[str] = field(default_factory=lambda: list(TASKS))
    count: int = 2000
    eval_count: int = 200

    def validate(self) -> None:
        if not isinstance(self.source, str) or not self.source:
            raise ConfigError("data.source: must be 'synthetic' or a file path")
        if self.source == "synthetic":
            bad = [t for t in self.tasks if t not in TASKS]
            if bad or not self.tasks:
                raise ConfigError(f"data.tasks: unknown or empty task list {self.tasks!r}; choose from {list(TASKS)}")
        for name in ("count", "eval_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"data.{name}: must be a positive integer, got {value!r}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    experts: ExpertConfig = field(default_factory=ExpertConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.backbone.validate()
        self.experts.validate()
        self.train.validate()
        self.data.validate()
        if self.train.seq_len > self.backbone.max_seq_len:
            raise ConfigError(
                f"train.seq_len: {self.train.seq_len} exceeds backbone.max_seq_len={self.backbone.max_seq_len}")
        for lid in self.backbone.layer_ids():
            d, k = self.backbone.layer_shape(lid)
            if self.experts.rank > min(d, k):
                raise ConfigError(f"experts.rank: {self.experts.rank} exceeds min(d, k)={min(d, k)} for {lid}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "experts": self.experts.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        _reject_unknown("config", raw, {f.name for f in fields(cls)})
        sections = {"backbone": BackboneConfig, "experts": ExpertConfig, "train": TrainConfig, "data": DataConfig}
        built = {}
        for name, kind in sections.items():
            section = raw.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: must be a JSON object")
            _reject_unknown(name, section, {f.name for f in fields(kind)})
            defaults = kind()
            for f in fields(kind):
                if f.name in section:
                    _check_type(f"{name}.{f.name}", section[f.name], getattr(defaults, f.name))
            section = dict(section)
            if name == "train" and "betas" in section:
                section["betas"] = tuple(section["betas"])
            built[name] = kind(**section)
        out_dir = raw.get("out_dir", cls.out_dir)
        if not isinstance(out_dir, str):
            raise ConfigError("out_dir: must be a string")
        cfg = cls(out_dir=out_dir, **built)
        cfg.validate()
        return cfg


def _reject_unknown(section: str, raw: dict, known: set[str]) -> None:
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{section}: unknown fields {extra}")


def _check_type(path: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif default is None:
        ok = value is None or isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    return RunConfig.from_dict(raw)
