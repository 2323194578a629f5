"""Class-balanced segmentation loss, squared endpoint-error flow loss, and their combination."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from segflow.types import ShapeError

REDUCTIONS = ("sum", "mean")


class UnsupervisableSample(ValueError):
    """Raised when a flow sample has no valid pixel to supervise."""


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def fg_bg_weight(mask):
    """Foreground fraction |fg| / (|fg| + |bg|) of a binary mask.

    Returns a float for a single mask and a tensor of per-sample weights for
    a batch of shape (N, H, W).
    """
    mask = _as_tensor(mask)
    if mask.numel() == 0:
        raise ValueError("mask must contain at least one pixel")
    m = mask.to(torch.float64)
    if m.ndim <= 2:
        return float(m.sum() / m.numel())
    return m.flatten(1).mean(dim=1)


def weighted_seg_loss(seg_logits, mask_gt, reduction: str = "sum") -> torch.Tensor:
    """Class-balanced two-class cross-entropy.

    ``seg_logits`` is (2, H, W) or (N, 2, H, W); channel 1 is foreground.
    Foreground pixels are weighted by (1 - w) and background pixels by w,
    where w is the foreground fraction of the sample's mask. ``sum`` adds
    over pixels (and samples); ``mean`` divides by the pixel count.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    logits = _as_tensor(seg_logits)
    mask = _as_tensor(mask_gt)
    if logits.ndim == 3:
        logits, mask = logits.unsqueeze(0), mask.unsqueeze(0)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"seg_logits must be (N, 2, H, W), got {tuple(logits.shape)}")
    if tuple(mask.shape) != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("seg_logits contain non-finite values")

    fg = mask.to(logits.dtype)
    w = fg.flatten(1).mean(dim=1).view(-1, 1, 1)
    logp = F.log_softmax(logits, dim=1)
    per_pixel = -((1 - w) * fg * logp[:, 1] + w * (1 - fg) * logp[:, 0])
    total = per_pixel.sum()
    if reduction == "mean":
        total = total / per_pixel.numel()
    return total


def epe_loss(flow_pred, flow_gt, flow_valid=None, reduction: str = "mean") -> torch.Tensor:
    """Squared endpoint error (u - du)^2 + (v - dv)^2 over valid pixels.

    No square root is taken; ``average_endpoint_error`` in metrics is the
    rooted evaluation measure. ``mean`` averages over valid pixels.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    pred = _as_tensor(flow_pred)
    gt = _as_tensor(flow_gt).to(pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeError(f"flow shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.ndim == 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
        if flow_valid is not None:
            flow_valid = _as_tensor(flow_valid).unsqueeze(0)
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ShapeError(f"flow must be (N, 2, H, W), got {tuple(pred.shape)}")
    if flow_valid is None:
        valid = torch.ones(pred.shape[0], *pred.shape[2:], dtype=pred.dtype)
    else:
        valid = _as_tensor(flow_valid).to(pred.dtype)
        if tuple(valid.shape) != (pred.shape[0], *pred.shape[2:]):
            raise ShapeError("flow_valid shape mismatch")
    n_valid = valid.sum()
    if n_valid <= 0:
        raise UnsupervisableSample("no valid flow pixels")
    sq = ((pred - gt) ** 2).sum(dim=1) * valid
    total = sq.sum()
    if reduction == "mean":
        total = total / n_valid
    return total


def combined_loss(seg_loss, flow_loss, lambda_flow: float) -> torch.Tensor:
    if not lambda_flow > 0:
        raise ValueError("lambda_flow must be positive")
    seg_loss = _as_tensor(seg_loss)
    flow_loss = _as_tensor(flow_loss)
    if not (torch.isfinite(seg_loss).all() and torch.isfinite(flow_loss).all()):
        raise ValueError("losses must be finite")
    return seg_loss + lambda_flow * flow_loss
