"""One declarative run configuration covering every tunable in the pipeline.

A run config can be loaded from a JSON file, overridden by CLI flags, and is
serialized into each run directory so a run is reproducible from its
artifacts alone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .fa_attention import FAConfig
from .losses import LossWeights
from .networks import BackboneConfig
from .sampling import SamplerConfig
from .training import TrainConfig


def _cli_fa_default() -> FAConfig:
    # 256x256 input with three downsamples gives a 32x32 bottleneck; patch 2
    # keeps the token grid 16x16.
    return FAConfig(patch=2)


@dataclass
class RunConfig:
    resolution: int = 256
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fa: FAConfig = field(default_factory=_cli_fa_default)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "seed": self.seed,
            "backbone": dataclasses.asdict(self.backbone),
            "fa": dataclasses.asdict(self.fa),
            "weights": dataclasses.asdict(self.weights),
            "train": dataclasses.asdict(self.train),
            "sampler": dataclasses.asdict(self.sampler),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "resolution" in d:
            kwargs["resolution"] = int(d["resolution"])
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if "backbone" in d:
            kwargs["backbone"] = BackboneConfig.from_dict(d["backbone"])
        if "fa" in d:
            kwargs["fa"] = FAConfig.from_dict(d["fa"])
        if "weights" in d:
            kwargs["weights"] = LossWeights(**d["weights"])
        if "train" in d:
            kwargs["train"] = TrainConfig(**d["train"])
        if "sampler" in d:
            kwargs["sampler"] = SamplerConfig(**d["sampler"])
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc

    def replace_fields(self, **updates) -> "RunConfig":
        """Return a copy with nested dataclass fields rebuilt from keyword paths.

        Keys use dotted paths, e.g. ``train.lr`` or ``sampler.steps``; None
        values are ignored so unset CLI flags pass through.
        """
        data = self.to_dict()
        for key, value in updates.items():
            if value is None:
                continue
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            if parts[-1] not in node:
                raise ConfigurationError(f"unknown config field: {key}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)
