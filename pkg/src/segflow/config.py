"""Model and training hyper-parameters."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Any

VALID_FUSION_SCALES = (8, 16, 32)


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    encoder_channels: tuple[int, ...] = (16, 32, 64, 96, 128)
    flow_channels: tuple[int, ...] = (16, 32, 64, 96, 128)
    fusion_enabled: bool = True
    fusion_scales: tuple[int, ...] = (8, 16, 32)
    lambda_flow: float = 0.1
    seed: int = 0

    def __post_init__(self):
        # normalise lists coming from yaml/json
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        object.__setattr__(self, "flow_channels", tuple(int(v) for v in self.flow_channels))
        object.__setattr__(self, "fusion_scales", tuple(sorted({int(v) for v in self.fusion_scales})))
        self.validate()

    def validate(self) -> None:
        if len(self.input_size) != 2:
            raise ConfigError("input_size must be (height, width)")
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input_size {self.input_size} must be positive and divisible by 32")
        if len(self.encoder_channels) != 5:
            raise ConfigError("encoder_channels needs exactly 5 entries")
        if len(self.flow_channels) != 5:
            raise ConfigError("flow_channels needs exactly 5 entries (one per encoder step)")
        if min(self.encoder_channels) < 1 or min(self.flow_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        bad = set(self.fusion_scales) - set(VALID_FUSION_SCALES)
        if bad:
            raise ConfigError(f"fusion scales {sorted(bad)} not in {VALID_FUSION_SCALES}")
        if self.fusion_enabled and not self.fusion_scales:
            raise ConfigError("fusion_scales must be non-empty when fusion is enabled")
        if not self.lambda_flow > 0:
            raise ConfigError("lambda_flow must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("input_size", "encoder_channels", "flow_channels", "fusion_scales"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    """Offline/online schedule.

    Learning rates are desk-scale; the 10:1 ratio between segmentation and
    flow rates plays the role of the flow-loss weight.
    """

    rounds: int = 3
    lr_seg: float = 0.1
    lr_flow: float = 0.01
    lr_online: float = 0.01
    halving_interval: int = 500
    batch_size: int = 1
    momentum: float = 0.9
    patience: int = 4
    min_delta: float = 1e-3
    max_steps_per_phase: int = 1500
    val_interval: int = 150
    val_fraction: float = 0.1
    first_branch: str = "segmentation"
    seg_reduction: str = "mean"
    flow_reduction: str = "mean"
    seg_augmentation: bool = True
    flow_augmentation: bool = True
    flow_synthesis: float = 0.5
    online_samples: int = 100
    online_steps: int = 200
    seed: int = 0
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("rounds", "halving_interval", "batch_size", "patience",
                     "max_steps_per_phase", "val_interval", "online_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.online_steps < 0:
            raise ConfigError("online_steps must be >= 0")
        for name in ("lr_seg", "lr_flow", "lr_online"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.min_delta < 0 or self.momentum < 0:
            raise ConfigError("min_delta and momentum must be non-negative")
        if not 0.0 <= self.flow_synthesis <= 1.0:
            raise ConfigError("flow_synthesis must lie in [0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.first_branch not in ("segmentation", "flow"):
            raise ConfigError("first_branch must be 'segmentation' or 'flow'")
        for name in ("seg_reduction", "flow_reduction"):
            if getattr(self, name) not in ("sum", "mean"):
                raise ConfigError(f"{name} must be 'sum' or 'mean'")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class AffineRanges:
    """Sampling ranges for sequence-level affine augmentation.

    Shifts are fractions of the image size; rotation is in degrees.
    """

    max_shift: float = 0.10
    max_rotation_deg: float = 15.0
    flip_probability: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        if self.max_shift < 0 or self.max_rotation_deg < 0:
            raise ConfigError("affine ranges must be non-negative")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scale_range"] = list(d["scale_range"])
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AffineRanges":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class SynthesisRanges:
    """Bounds for the synthetic object motion used to fabricate a next frame."""

    max_displacement: float = 0.05
    max_rotation_deg: float = 5.0
    integer_displacement: bool = False

    def __post_init__(self):
        if self.max_displacement < 0 or self.max_rotation_deg < 0:
            raise ConfigError("synthesis ranges must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SynthesisRanges":
        return _from_dict(cls, data)


__all__ = [
    "AffineRanges",
    "ConfigError",
    "ModelConfig",
    "SynthesisRanges",
    "TrainConfig",
    "VALID_FUSION_SCALES",
]
