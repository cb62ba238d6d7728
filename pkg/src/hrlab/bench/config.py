"""Experiment configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

ALGORITHMS = ("oucbvi-fixed-options", "ucbvi-flat", "hlml")
EMITS = ("csv", "json", "plotdata")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    env: str
    algorithm: str
    K: int
    delta: float = 0.1
    seeds: list[int] = field(default_factory=lambda: [1])
    reward_mode: str = "known"
    reset_high: bool = False
    reset_low: bool = False
    draw: str = "per-option"
    out: str = "runs"
    emit: list[str] = field(default_factory=lambda: ["csv", "json"])

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.env, str) or not self.env:
            raise ConfigError("env", "must be a registry name or a bundle path")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"{self.algorithm!r} not in {ALGORITHMS}")
        if isinstance(self.K, bool) or not isinstance(self.K, int) or self.K < 2:
            raise ConfigError("K", f"must be an integer >= 2, got {self.K!r}")
        if isinstance(self.delta, bool) or not isinstance(self.delta, (int, float)) or not 0.0 < self.delta < 1.0:
            raise ConfigError("delta", f"must lie in (0, 1), got {self.delta!r}")
        seeds = list(self.seeds)
        if not seeds:
            raise ConfigError("seeds", "must be non-empty")
        if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
            raise ConfigError("seeds", "must be non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds", "must be distinct")
        if self.reward_mode not in ("known", "estimated"):
            raise ConfigError("reward_mode", f"{self.reward_mode!r} not in ('known', 'estimated')")
        if self.draw not in ("per-option", "joint"):
            raise ConfigError("draw", f"{self.draw!r} not in ('per-option', 'joint')")
        for flag in ("reset_high", "reset_low"):
            if not isinstance(getattr(self, flag), bool):
                raise ConfigError(flag, "must be a boolean")
        bad = [e for e in self.emit if e not in EMITS]
        if bad:
            raise ConfigError("emit", f"unknown entries {bad}; allowed {EMITS}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(doc) - known)
        if extra:
            raise ConfigError(extra[0], "unknown field")
        for req in ("env", "algorithm", "K"):
            if req not in doc:
                raise ConfigError(req, "missing")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config", "top level must be an object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON, excluding the output directory."""
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
