"""Containers passed between the model, training, augmentation and metrics code.

Arrays are channel-first: frames are (3, H, W) floats in [0, 1], flow fields
are (2, H, W) with channel 0 = u (horizontal, +x = right) and channel 1 = v
(vertical, +y = down). Masks are (H, W) arrays of 0/1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch


class ShapeError(ValueError):
    pass


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


@dataclass
class FramePair:
    frame_t: np.ndarray
    frame_t1: np.ndarray
    mask_gt: Optional[np.ndarray] = None
    flow_gt: Optional[np.ndarray] = None
    flow_valid: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.frame_t.shape[1:])

    def validate(self, input_size: tuple[int, int] | None = None) -> None:
        if self.frame_t.ndim != 3 or self.frame_t.shape[0] != 3:
            raise ShapeError(f"frame_t must be (3, H, W), got {self.frame_t.shape}")
        if self.frame_t1.shape != self.frame_t.shape:
            raise ShapeError("frame_t and frame_t1 must share a shape")
        hw = self.size
        if input_size is not None and tuple(input_size) != hw:
            raise ShapeError(f"pair size {hw} does not match model input {tuple(input_size)}")
        if self.mask_gt is not None:
            if self.mask_gt.shape != hw:
                raise ShapeError("mask_gt shape mismatch")
            if not _is_binary(self.mask_gt):
                raise ValueError("mask_gt must be binary")
        if self.flow_gt is not None and self.flow_gt.shape != (2, *hw):
            raise ShapeError("flow_gt must be (2, H, W)")
        if self.flow_valid is not None:
            if self.flow_valid.shape != hw:
                raise ShapeError("flow_valid shape mismatch")
            if not _is_binary(self.flow_valid):
                raise ValueError("flow_valid must be binary")

    def flipped(self) -> "FramePair":
        """Horizontal mirror, with the u component of the flow negated."""
        flow = None
        if self.flow_gt is not None:
            flow = self.flow_gt[:, :, ::-1].copy()
            flow[0] = -flow[0]
        return FramePair(
            frame_t=self.frame_t[:, :, ::-1].copy(),
            frame_t1=self.frame_t1[:, :, ::-1].copy(),
            mask_gt=None if self.mask_gt is None else self.mask_gt[:, ::-1].copy(),
            flow_gt=flow,
            flow_valid=None if self.flow_valid is None else self.flow_valid[:, ::-1].copy(),
            name=self.name,
        )


@dataclass
class FeaturePyramid:
    """Multi-scale features keyed by scale denominator (8 means 1/8 resolution)."""

    levels: dict[int, torch.Tensor] = field(default_factory=dict)
    input_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.levels = dict(sorted(self.levels.items()))
        if self.input_size is not None:
            self.check(self.input_size)

    def check(self, input_size: tuple[int, int]) -> None:
        h, w = input_size
        for scale, feat in self.levels.items():
            expect = (h // scale, w // scale)
            if tuple(feat.shape[-2:]) != expect:
                raise ShapeError(f"level 1/{scale} has spatial shape {tuple(feat.shape[-2:])}, expected {expect}")

    @property
    def scales(self) -> list[int]:
        return list(self.levels)

    def __getitem__(self, scale: int) -> torch.Tensor:
        return self.levels[scale]


@dataclass
class SegFlowOutput:
    """Full-resolution outputs of one forward pass, batched: (N, 2, H, W) each."""

    seg_logits: torch.Tensor
    flow_pred: torch.Tensor

    def fg_prob(self) -> torch.Tensor:
        return torch.softmax(self.seg_logits, dim=1)[:, 1]

    def masks(self, threshold: float = 0.5) -> np.ndarray:
        return (self.fg_prob() > threshold).to(torch.uint8).cpu().numpy()
