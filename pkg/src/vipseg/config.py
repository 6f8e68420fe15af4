"""Run configuration: defaults < config file < command-line flags."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError


@dataclass
class RunConfig:
    alpha: float = 2.0
    beta: int = 2
    tau: float = 4.0
    threshold: float = 0.4
    gate: float = 0.7
    logit_scale: Optional[float] = None
    self_correction: bool = True
    aggregation: str = "free_energy"
    min_support: int = 5
    vg_scope: str = "restricted"
    template_mode: str = "ensemble"
    max_images: Optional[int] = None
    window: Optional[int] = None
    stride: Optional[int] = None
    short_side: Optional[int] = None
    jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.aggregation not in ("free_energy", "max", "mean", "plain"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")
        if self.template_mode not in ("ensemble", "per_template"):
            raise ConfigurationError(f"unknown template_mode {self.template_mode!r}")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text) or {}
        else:
            doc = json.loads(text)
        return cls.from_dict(doc.get("run", doc))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def merged(self, overrides: dict) -> "RunConfig":
        data = asdict(self)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def make_backend(cfg: Optional[dict]):
    if not cfg:
        raise ConfigurationError("no backend section configured")
    kind = cfg.get("kind")
    if kind == "synthetic":
        from .synthetic import SyntheticBackend

        try:
            return SyntheticBackend.from_config(cfg)
        except TypeError as exc:
            raise ConfigurationError(f"bad synthetic backend config: {exc}") from exc
    if kind == "checkpoint":
        from .torch_backend import load_checkpoint_backend

        return load_checkpoint_backend(cfg)
    raise ConfigurationError(f"unknown backend kind {kind!r}")


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]
