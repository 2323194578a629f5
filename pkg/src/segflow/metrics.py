"""Segmentation and flow evaluation: J, F, T-proxy, average EPE, and flip-ensemble inference."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage

from segflow.model import forward
from segflow.types import FramePair, SegFlowOutput, ShapeError


def _binary(a) -> np.ndarray:
    return np.asarray(a).astype(bool)


def region_similarity(pred_mask, gt_mask) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    p, g = _binary(pred_mask), _binary(gt_mask)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def mask_boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside the canvas counts as background)."""
    m = _binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1))
    return (padded & ~interior)[1:-1, 1:-1]


def _disk(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= radius * radius


def contour_accuracy(pred_mask, gt_mask, tolerance_px: float = 2) -> float:
    """Boundary F-measure with a disk-shaped tolerance band."""
    pb, gb = mask_boundary(pred_mask), mask_boundary(gt_mask)
    if pb.shape != gb.shape:
        raise ShapeError("mask shapes differ")
    n_p, n_g = pb.sum(), gb.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(tolerance_px)
    g_dil = ndimage.binary_dilation(gb, structure=disk)
    p_dil = ndimage.binary_dilation(pb, structure=disk)
    precision = (pb & g_dil).sum() / n_p
    recall = (gb & p_dil).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def stat_triplet(values: Sequence[float], threshold: float = 0.5) -> tuple[float, float, float]:
    """(mean, recall, decay) of per-frame scores.

    Recall is the fraction of frames scoring above ``threshold``. Decay is
    the mean of the first temporal quartile minus that of the last; with
    fewer than four frames the first and last frames stand in.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    mean = float(v.mean())
    recall = float((v > threshold).mean())
    if v.size >= 4:
        bins = np.array_split(v, 4)
        decay = float(bins[0].mean() - bins[-1].mean())
    else:
        decay = float(v[0] - v[-1])
    return mean, recall, decay


def forward_warp_mask(mask, flow) -> np.ndarray:
    """Splat each foreground pixel to its nearest target pixel under ``flow`` (2, H, W)."""
    m = _binary(mask)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = m.shape
    if flow.shape != (2, h, w):
        raise ShapeError("flow must be (2, H, W) matching the mask")
    ys, xs = np.nonzero(m)
    tx = np.rint(xs + flow[0, ys, xs]).astype(np.int64)
    ty = np.rint(ys + flow[1, ys, xs]).astype(np.int64)
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    out = np.zeros_like(m)
    out[ty[keep], tx[keep]] = True
    return out


def temporal_stability_proxy(masks: Sequence, flows: Sequence) -> float:
    """Mean over transitions of 1 - IoU(forward-warped mask_t, mask_{t+1}); lower is steadier.

    ``flows[t]`` maps frame t to frame t+1. This is a flow-warped IoU stand-in
    for the benchmark's contour-matching temporal measure and is reported as
    "T-proxy".
    """
    if len(masks) < 2:
        raise ValueError("temporal stability needs at least two frames")
    if len(flows) < len(masks) - 1:
        raise ValueError("need one flow per transition")
    errs = [1.0 - region_similarity(forward_warp_mask(masks[t], flows[t]), masks[t + 1])
            for t in range(len(masks) - 1)]
    return float(np.mean(errs))


def average_endpoint_error(flow_pred, flow_gt, flow_valid=None) -> float:
    """Mean Euclidean endpoint error over valid pixels."""
    p = np.asarray(flow_pred, dtype=np.float64)
    g = np.asarray(flow_gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-3] != 2:
        raise ShapeError(f"flow shapes differ or are not (2, H, W): {p.shape} vs {g.shape}")
    err = np.sqrt(((p - g) ** 2).sum(axis=-3))
    valid = np.ones(err.shape, bool) if flow_valid is None else _binary(flow_valid)
    if valid.shape != err.shape:
        raise ShapeError("flow_valid shape mismatch")
    if not valid.any():
        raise ValueError("no valid pixels")
    return float(err[valid].mean())


@torch.no_grad()
def flip_ensemble_infer(model, pair: FramePair) -> SegFlowOutput:
    """Average the prediction on a pair with the un-mirrored prediction on its mirror.

    Foreground probabilities are averaged (returned as log-probabilities, which
    are valid logits); the mirrored flow has its u component negated.
    """
    a = forward(model, pair)
    b = forward(model, pair.flipped())
    prob_b = torch.softmax(b.seg_logits, dim=1).flip(-1)
    prob = 0.5 * (torch.softmax(a.seg_logits, dim=1) + prob_b)
    flow_b = b.flow_pred.flip(-1).clone()
    flow_b[:, 0] = -flow_b[:, 0]
    return SegFlowOutput(seg_logits=torch.log(prob.clamp_min(torch.finfo(prob.dtype).tiny)),
                         flow_pred=0.5 * (a.flow_pred + flow_b))


@dataclass
class SequenceEval:
    per_frame_J: list[float]
    per_frame_F: list[float]
    T_value: float
    frames: int
    epe: float | None = None

    def __post_init__(self):
        if len(self.per_frame_J) != self.frames or len(self.per_frame_F) != self.frames:
            raise ValueError("per-frame lists must have one entry per frame")

    def to_dict(self) -> dict:
        return {"per_frame_J": list(self.per_frame_J), "per_frame_F": list(self.per_frame_F),
                "T_value": self.T_value, "frames": self.frames, "epe": self.epe}


@dataclass
class EvalReport:
    J_mean: float
    J_recall: float
    J_decay: float
    F_mean: float
    F_recall: float
    F_decay: float
    T_mean: float
    per_sequence: dict[str, SequenceEval] = field(default_factory=dict)
    epe: float | None = None

    ROWS = (("J Mean", "J_mean"), ("J Recall", "J_recall"), ("J Decay", "J_decay"),
            ("F Mean", "F_mean"), ("F Recall", "F_recall"), ("F Decay", "F_decay"),
            ("T-proxy Mean", "T_mean"))

    @classmethod
    def from_sequences(cls, per_sequence: Mapping[str, SequenceEval]) -> "EvalReport":
        if not per_sequence:
            raise ValueError("no sequences to aggregate")
        seqs = dict(sorted(per_sequence.items()))
        j = np.array([stat_triplet(s.per_frame_J) for s in seqs.values()])
        f = np.array([stat_triplet(s.per_frame_F) for s in seqs.values()])
        epes = [s.epe for s in seqs.values() if s.epe is not None]
        return cls(
            J_mean=float(j[:, 0].mean()), J_recall=float(j[:, 1].mean()), J_decay=float(j[:, 2].mean()),
            F_mean=float(f[:, 0].mean()), F_recall=float(f[:, 1].mean()), F_decay=float(f[:, 2].mean()),
            T_mean=float(np.mean([s.T_value for s in seqs.values()])),
            per_sequence=seqs,
            epe=float(np.mean(epes)) if epes else None,
        )

    def to_dict(self) -> dict:
        d = {attr: getattr(self, attr) for _, attr in self.ROWS}
        d["epe"] = self.epe
        d["per_sequence"] = {k: v.to_dict() for k, v in self.per_sequence.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        seqs = {k: SequenceEval(**v) for k, v in d["per_sequence"].items()}
        return cls(**{attr: d[attr] for _, attr in cls.ROWS}, per_sequence=seqs, epe=d.get("epe"))

    def to_text(self, label: str = "value") -> str:
        lines = [f"{'Measure':<14}{label:>10}"]
        for name, attr in self.ROWS:
            lines.append(f"{name:<14}{getattr(self, attr):>10.4f}")
        if self.epe is not None:
            lines.append(f"{'Avg EPE':<14}{self.epe:>10.4f}")
        return "\n".join(lines) + "\n"


def evaluate_sequence(pred_masks, gt_masks, flows, tolerance_px: float = 2,
                      flow_preds=None, flow_gts=None, flow_valids=None) -> SequenceEval:
    """Score one sequence; ``flows`` drive the T-proxy, the optional flow arrays give EPE."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and ground-truth sequences differ in length")
    js = [region_similarity(p, g) for p, g in zip(pred_masks, gt_masks)]
    fs = [contour_accuracy(p, g, tolerance_px) for p, g in zip(pred_masks, gt_masks)]
    t = temporal_stability_proxy(pred_masks, flows) if len(pred_masks) >= 2 else 0.0
    epe = None
    if flow_preds is not None and flow_gts is not None:
        valids = flow_valids if flow_valids is not None else [None] * len(flow_gts)
        epe = float(np.mean([average_endpoint_error(p, g, v) for p, g, v in zip(flow_preds, flow_gts, valids)]))
    return SequenceEval(per_frame_J=js, per_frame_F=fs, T_value=t, frames=len(js), epe=epe)


@torch.no_grad()
def evaluate_model(model, sequences: Mapping[str, Sequence[FramePair]], flip_ensemble: bool = False,
                   tolerance_px: float = 2) -> EvalReport:
    """Predict every pair of every sequence and score masks (frame t of each pair) and flows.

    The T-proxy warps predicted masks with ground-truth flow when a pair has
    it and with the predicted flow otherwise.
    """
    model.eval()
    per_seq = {}
    for name, pairs in sorted(sequences.items()):
        preds, gts, warp_flows, fp, fg, fv = [], [], [], [], [], []
        for pair in pairs:
            out = flip_ensemble_infer(model, pair) if flip_ensemble else forward(model, pair)
            preds.append(out.masks()[0])
            gts.append(pair.mask_gt)
            flow = out.flow_pred[0].double().cpu().numpy()
            if pair.flow_gt is not None:
                warp_flows.append(pair.flow_gt)
                fp.append(flow)
                fg.append(pair.flow_gt)
                fv.append(pair.flow_valid)
            else:
                warp_flows.append(flow)
        if any(g is None for g in gts):
            raise ValueError(f"sequence {name} lacks masks for evaluation")
        per_seq[name] = evaluate_sequence(preds, gts, warp_flows, tolerance_px,
                                          flow_preds=fp or None, flow_gts=fg or None, flow_valids=fv or None)
    return EvalReport.from_sequences(per_seq)
