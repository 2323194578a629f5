"""Sequence-consistent affine augmentation and synthetic next frames with analytic flow.

Pixel coordinates are (x, y) = (column, row); affine matrices are 3x3 and map
source coordinates to destination coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from segflow.config import AffineRanges, SynthesisRanges
from segflow.types import FramePair


@dataclass(frozen=True)
class AffineParams:
    shift: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    flip_horizontal: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def matrix(self, size: tuple[int, int]) -> np.ndarray:
        """Source-to-destination transform about the image centre for an (H, W) canvas."""
        h, w = size
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        lin = self.scale * np.array([[c, -s], [s, c]])
        if self.flip_horizontal:
            lin = lin @ np.diag([-1.0, 1.0])
        m = np.eye(3)
        m[:2, :2] = lin
        centre = np.array([cx, cy])
        m[:2, 2] = centre - lin @ centre + np.asarray(self.shift, dtype=np.float64)
        return m

    @property
    def is_identity(self) -> bool:
        return (self.shift == (0.0, 0.0) and self.rotation == 0.0
                and not self.flip_horizontal and self.scale == 1.0)


@dataclass(frozen=True)
class SynthesisParams:
    object_displacement: tuple[float, float] = (0.0, 0.0)
    object_rotation: float = 0.0


def sample_affine(rng: np.random.Generator, ranges: AffineRanges, size: tuple[int, int]) -> AffineParams:
    h, w = size
    dx = rng.uniform(-1.0, 1.0) * ranges.max_shift * w
    dy = rng.uniform(-1.0, 1.0) * ranges.max_shift * h
    rot = math.radians(rng.uniform(-1.0, 1.0) * ranges.max_rotation_deg)
    flip = bool(rng.uniform() < ranges.flip_probability)
    lo, hi = ranges.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    return AffineParams(shift=(float(dx), float(dy)), rotation=float(rot), flip_horizontal=flip, scale=scale)


def sample_synthesis(rng: np.random.Generator, ranges: SynthesisRanges, size: tuple[int, int]) -> SynthesisParams:
    h, w = size
    dx = rng.uniform(-1.0, 1.0) * ranges.max_displacement * w
    dy = rng.uniform(-1.0, 1.0) * ranges.max_displacement * h
    rot = math.radians(rng.uniform(-1.0, 1.0) * ranges.max_rotation_deg)
    if ranges.integer_displacement:
        dx, dy = round(dx), round(dy)
    return SynthesisParams(object_displacement=(float(dx), float(dy)), object_rotation=float(rot))


def _pixel_grid(size):
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def _warp_with_inverse(img: np.ndarray, inv: np.ndarray, order: int) -> np.ndarray:
    """Sample ``img`` (H, W) at inv @ (x, y, 1) for every destination pixel; zeros outside."""
    xs, ys = _pixel_grid(img.shape)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return ndimage.map_coordinates(img, [sy, sx], order=order, mode="constant", cval=0.0)


def warp_image(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear warp of a (C, H, W) image by a source-to-destination matrix."""
    inv = np.linalg.inv(matrix)
    return np.stack([_warp_with_inverse(ch.astype(np.float64), inv, 1) for ch in image]).astype(image.dtype)


def warp_mask(mask: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(matrix)
    out = _warp_with_inverse(mask.astype(np.float64), inv, 0)
    return (out >= 0.5).astype(np.uint8)


def apply_affine_sequence(frames: Sequence[np.ndarray], masks: Sequence[np.ndarray | None],
                          params: AffineParams, return_matrices: bool = False):
    """Apply one transform to every frame (bilinear) and mask (nearest) of a sequence."""
    if len(frames) != len(masks):
        raise ValueError("frames and masks must be aligned")
    if not frames:
        return ([], [], []) if return_matrices else ([], [])
    size = frames[0].shape[-2:]
    out_f, out_m, mats = [], [], []
    for frame, mask in zip(frames, masks):
        m = params.matrix(size)
        mats.append(m)
        if params.is_identity:
            out_f.append(frame.copy())
            out_m.append(None if mask is None else mask.copy())
            continue
        out_f.append(warp_image(frame, m))
        out_m.append(None if mask is None else warp_mask(mask, m))
    if return_matrices:
        return out_f, out_m, mats
    return out_f, out_m


def apply_affine_pair(pair: FramePair, params: AffineParams) -> FramePair:
    """Transform both frames of a pair identically and carry masks and flow along.

    A flow vector f at source pixel q becomes L f at destination A q, where L is
    the linear part of the transform.
    """
    if params.is_identity:
        return pair
    size = pair.size
    frames, masks = apply_affine_sequence([pair.frame_t, pair.frame_t1], [pair.mask_gt, None], params)
    flow = valid = None
    if pair.flow_gt is not None:
        m = params.matrix(size)
        inv = np.linalg.inv(m)
        src_valid = np.ones(size) if pair.flow_valid is None else pair.flow_valid.astype(np.float64)
        # pixels sourced from outside the canvas carry no flow
        inside = _warp_with_inverse(np.ones(size), inv, 0) >= 0.5
        valid = ((_warp_with_inverse(src_valid, inv, 0) >= 0.5) & inside).astype(np.uint8)
        u = _warp_with_inverse(pair.flow_gt[0].astype(np.float64), inv, 1)
        v = _warp_with_inverse(pair.flow_gt[1].astype(np.float64), inv, 1)
        lin = m[:2, :2]
        flow = np.stack([lin[0, 0] * u + lin[0, 1] * v, lin[1, 0] * u + lin[1, 1] * v]).astype(pair.flow_gt.dtype)
        flow[:, ~inside] = 0
    return FramePair(frames[0], frames[1], masks[0], flow, valid, name=pair.name)


def backward_warp(image: np.ndarray, flow: np.ndarray, order: int = 1) -> np.ndarray:
    """out(x) = image(x + flow(x)), bilinear by default, zeros outside the canvas."""
    xs, ys = _pixel_grid(image.shape[-2:])
    coords = [ys + flow[1], xs + flow[0]]
    if image.ndim == 2:
        return ndimage.map_coordinates(image.astype(np.float64), coords, order=order, mode="constant", cval=0.0)
    return np.stack([ndimage.map_coordinates(ch.astype(np.float64), coords, order=order, mode="constant", cval=0.0)
                     for ch in image])


def _object_transform(mask: np.ndarray, params: SynthesisParams):
    ys, xs = np.nonzero(mask)
    centre = np.array([xs.mean(), ys.mean()])
    c, s = math.cos(params.object_rotation), math.sin(params.object_rotation)
    rot = np.array([[c, -s], [s, c]])
    m = np.eye(3)
    m[:2, :2] = rot
    m[:2, 2] = centre - rot @ centre + np.asarray(params.object_displacement, dtype=np.float64)
    return m


def moved_mask(mask: np.ndarray, params: SynthesisParams) -> np.ndarray:
    """Support of the foreground object after the synthetic motion."""
    if not mask.any():
        raise ValueError("mask is empty")
    return warp_mask(mask, _object_transform(mask, params))


def synthesize_next_frame(frame: np.ndarray, mask: np.ndarray, params: SynthesisParams,
                          strict_valid: bool = False):
    """Fabricate frame t+1 by moving the masked object; returns (frame', flow_gt, flow_valid).

    Pixels the object vacates and does not re-cover are left black. ``flow_gt``
    holds each frame-t pixel's displacement (the object motion inside the mask,
    zero elsewhere). By default every pixel is valid; ``strict_valid`` drops
    background pixels hidden by the moved object and object pixels that leave
    the canvas.
    """
    mask = np.asarray(mask)
    if not mask.any():
        raise ValueError("mask is empty")
    fg = mask.astype(bool)
    m = _object_transform(mask, params)
    inv = np.linalg.inv(m)
    covered = warp_mask(mask, m).astype(bool)

    out = frame.copy()
    out[:, fg] = 0
    moved = np.stack([_warp_with_inverse(ch.astype(np.float64), inv, 1) for ch in frame])
    out[:, covered] = moved[:, covered].astype(frame.dtype)

    xs, ys = _pixel_grid(mask.shape)
    tx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    ty = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    flow = np.zeros((2, *mask.shape), dtype=np.float32)
    flow[0][fg] = (tx - xs)[fg]
    flow[1][fg] = (ty - ys)[fg]

    valid = np.ones(mask.shape, dtype=np.uint8)
    if strict_valid:
        h, w = mask.shape
        leaves = fg & ((tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1))
        valid[leaves | (covered & ~fg)] = 0
    return out, flow, valid


def augment_dataset(frame: np.ndarray, mask: np.ndarray, n_samples: int, rng: np.random.Generator,
                    affine_ranges: AffineRanges | None = None, synthesis_ranges: SynthesisRanges | None = None,
                    seg_augmentation: bool = True, flow_augmentation: bool = True,
                    max_tries: int = 10) -> list[FramePair]:
    """Expand one annotated frame into training pairs.

    Each sample applies a random affine transform to the frame and mask, then
    fabricates a next frame by moving the (transformed) object. With
    ``flow_augmentation`` off the pair repeats the frame with zero flow.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not np.asarray(mask).any():
        raise ValueError("mask is empty")
    affine_ranges = affine_ranges or AffineRanges()
    synthesis_ranges = synthesis_ranges or SynthesisRanges()
    size = frame.shape[-2:]
    mask = np.asarray(mask).astype(np.uint8)
    pairs = []
    for i in range(n_samples):
        f_a, m_a = frame, mask
        if seg_augmentation:
            for _ in range(max_tries):
                params = sample_affine(rng, affine_ranges, size)
                (f_try,), (m_try,) = apply_affine_sequence([frame], [mask], params)
                if m_try.any():
                    f_a, m_a = f_try, m_try
                    break
        if flow_augmentation:
            sp = sample_synthesis(rng, synthesis_ranges, size)
            f1, flow, valid = synthesize_next_frame(f_a, m_a, sp)
        else:
            f1 = f_a.copy()
            flow = np.zeros((2, *size), dtype=np.float32)
            valid = np.ones(size, dtype=np.uint8)
        pairs.append(FramePair(f_a.astype(np.float32), f1.astype(np.float32), m_a, flow, valid, name=f"aug{i:04d}"))
    return pairs
