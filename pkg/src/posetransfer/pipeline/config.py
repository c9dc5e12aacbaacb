"""Pipeline configuration, serializable to JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict

from ..evalbench.synth import JointLimits, SynthSpec
from ..nn.layers import TransformerConfig
from ..shapefeat import ShapeFeatConfig


@dataclass(frozen=True)
class Stage1Config:
    n_train: int = 2000
    n_val: int = 200
    n_characters: int = 400
    epochs: int = 60
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    tau: float = 0.1
    sinkhorn_iters: int = 50
    symmetric_affinity: bool = False
    self_pair_fraction: float = 0.1
    grad_clip: float = 300.0  # global-norm cap; 0 disables
    cosine_decay: bool = True


@dataclass(frozen=True)
class Stage2Config:
    n_pairs: int = 500
    n_characters: int = 120
    epochs: int = 60
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    lambda_rec: float = 1.0
    lambda_reg: float = 0.1
    lambda_feat: float = 0.1
    use_prior: bool = True
    self_pair_fraction: float = 0.2
    resample_poses: bool = False
    cosine_decay: bool = True


@dataclass(frozen=True)
class PriorConfig:
    n_characters: int = 60
    poses_per_character: int = 20
    epochs: int = 30
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    lambda_sample: float = 0.1
    n_samples: int = 4
    decoder_hidden: int = 128


@dataclass(frozen=True)
class ArapConfig:
    iters: int = 10
    keypoint_weight: float = 10.0
    anchor_weight: float = 1e-3


@dataclass(frozen=True)
class PipelineConfig:
    model: TransformerConfig = field(default_factory=TransformerConfig)
    shape: ShapeFeatConfig = field(default_factory=ShapeFeatConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    limits: JointLimits = field(default_factory=JointLimits)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    prior: PriorConfig = field(default_factory=PriorConfig)
    arap: ArapConfig = field(default_factory=ArapConfig)
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "PipelineConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            val = d[f.name]
            default = getattr(cls(), f.name)
            if dataclasses.is_dataclass(default):
                known = {g.name for g in dataclasses.fields(default)}
                unknown = set(val) - known
                if unknown:
                    raise ValueError(f"unknown keys in config section {f.name!r}: {sorted(unknown)}")
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in val.items()}
                val = dataclasses.replace(default, **sub)
            kwargs[f.name] = val
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
