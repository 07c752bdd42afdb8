"""Session configuration: one YAML file per experiment.

The config hash (sha256 of the canonical JSON form) is embedded in every
checkpoint and report so artifacts can be traced back to the exact settings
that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import yaml

from .errors import ConfigError
from .gridnet import GridConfig, TASK_OUTPUT_CHANNELS, config_for
from .runtime import DelayConfig
from .train import TrainConfig


@dataclass
class CorpusConfig:
    directory: str = "corpus"
    counts: Dict[str, int] = field(
        default_factory=lambda: {"train": 2000, "test": 200, "val": 200}
    )
    duration_s: float = 5.0


@dataclass
class SessionConfig:
    """Everything one experiment needs: task, models, protocol, training."""

    task: str = "ss"
    small: Optional[GridConfig] = None
    medium: Optional[GridConfig] = None
    large: Optional[GridConfig] = None
    c_in_ms: float = 0.0
    c_out_ms: float = 0.0
    ratio: int = 1  # hint compression factor P
    context_len: int = 49  # cross-attention context V
    window_ms: int = 12
    hop_ms: int = 8
    sample_rate: int = 16000
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_OUTPUT_CHANNELS:
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("small", "medium", "large"):
            if getattr(self, name) is None:
                setattr(self, name, config_for(name, self.task))
        k = TASK_OUTPUT_CHANNELS[self.task]
        for name in ("small", "medium", "large"):
            cfg = getattr(self, name)
            if cfg.k != k:
                raise ConfigError(
                    f"{name} model k={cfg.k} inconsistent with task {self.task!r}"
                )
        if self.ratio <= 0 or (2 * k) % self.ratio != 0:
            raise ConfigError(f"2K={2 * k} not divisible by ratio {self.ratio}")
        if self.context_len < 0:
            raise ConfigError("context length must be >= 0")
        if self.window_ms < self.hop_ms:
            raise ConfigError("window must be >= hop")
        self.train.task = self.task
        self.train.ratio = self.ratio
        self.train.window_len = self.window_len
        self.train.hop_len = self.hop_len
        self.train.delay_chunks = self.delay.total_chunks

    @property
    def window_len(self) -> int:
        return self.window_ms * self.sample_rate // 1000

    @property
    def hop_len(self) -> int:
        return self.hop_ms * self.sample_rate // 1000

    @property
    def delay(self) -> DelayConfig:
        return DelayConfig(
            c_out_s=self.c_out_ms / 1000.0,
            c_in_s=self.c_in_ms / 1000.0,
            tau_s=self.hop_ms / 1000.0,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        data = dict(data)
        for name in ("small", "medium", "large"):
            if data.get(name) is not None:
                data[name] = GridConfig(**data[name])
        if "corpus" in data and data["corpus"] is not None:
            data["corpus"] = CorpusConfig(**data["corpus"])
        if "train" in data and data["train"] is not None:
            data["train"] = TrainConfig(**data["train"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SessionConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)
