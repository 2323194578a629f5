"""Alternating offline training of the two branches and per-sequence online fine-tuning.

Each phase optimises one branch with plain SGD while the other is frozen.
The frozen branch still runs forward, so its features keep flowing through
the fusion bridges. Segmentation phases minimise the class-balanced
cross-entropy; flow phases minimise the squared endpoint error at the
smaller flow learning rate, which is how the flow-loss weight enters
training.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from segflow.augmentation import (
    apply_affine_pair,
    augment_dataset,
    sample_affine,
    sample_synthesis,
    synthesize_next_frame,
)
from segflow.config import AffineRanges, SynthesisRanges, TrainConfig
from segflow.losses import epe_loss, weighted_seg_loss
from segflow.metrics import average_endpoint_error, region_similarity
from segflow.model import BRANCHES, SegFlowNet, load_checkpoint, pair_tensors, save_checkpoint
from segflow.types import FramePair

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: "TrainState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass
class TrainState:
    round_index: int
    active_branch: str
    step: int = 0
    lr_current: float = 0.0
    val_history: list[tuple[int, float]] = field(default_factory=list)
    train_history: list[tuple[int, float]] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    best_error: float = math.inf
    best_step: int = -1
    best_state: dict | None = field(default=None, repr=False)
    checkpoint_path: str | None = None
    diverged: bool = False
    diagnostic: str = ""

    def summary(self) -> dict:
        return {
            "round_index": self.round_index, "active_branch": self.active_branch, "step": self.step,
            "lr_current": self.lr_current, "val_history": [list(v) for v in self.val_history],
            "train_history": [list(v) for v in self.train_history], "best_error": self.best_error,
            "best_step": self.best_step, "checkpoint_path": self.checkpoint_path,
            "diverged": self.diverged, "diagnostic": self.diagnostic,
        }

    @classmethod
    def from_summary(cls, d: dict) -> "TrainState":
        d = dict(d)
        d["val_history"] = [tuple(v) for v in d["val_history"]]
        d["train_history"] = [tuple(v) for v in d["train_history"]]
        return cls(**d)


def lr_at(step: int, lr0: float, halving_interval: int) -> float:
    return lr0 * 2.0 ** (-(step // halving_interval))


def freeze_branch(model: SegFlowNet, branch: str) -> SegFlowNet:
    for p in model.branch_parameters(branch):
        p.requires_grad_(False)
    return model


def unfreeze_branch(model: SegFlowNet, branch: str) -> SegFlowNet:
    for p in model.branch_parameters(branch):
        p.requires_grad_(True)
    return model


def activate_branch(model: SegFlowNet, branch: str) -> SegFlowNet:
    """Unfreeze ``branch`` and freeze the other one."""
    other = "flow" if branch == "segmentation" else "segmentation"
    freeze_branch(model, other)
    return unfreeze_branch(model, branch)


def _branch_loss(model: SegFlowNet, branch: str, batch: list[FramePair], config: TrainConfig) -> torch.Tensor:
    ft, ft1 = pair_tensors(batch, model.dtype)
    out = model(ft, ft1)
    if not (torch.isfinite(out.seg_logits).all() and torch.isfinite(out.flow_pred).all()):
        return torch.tensor(float("nan"), dtype=model.dtype)
    if branch == "segmentation":
        mask = torch.from_numpy(np.stack([p.mask_gt for p in batch]))
        return weighted_seg_loss(out.seg_logits, mask, reduction=config.seg_reduction)
    flow = torch.from_numpy(np.stack([p.flow_gt for p in batch]))
    valid = torch.from_numpy(np.stack([p.flow_valid if p.flow_valid is not None
                                       else np.ones(p.size, np.uint8) for p in batch]))
    return epe_loss(out.flow_pred, flow, valid, reduction=config.flow_reduction)


@torch.no_grad()
def validation_error(model: SegFlowNet, branch: str, val_data: Sequence[FramePair]) -> float:
    """1 - mean IoU for segmentation, mean average endpoint error for flow."""
    model.eval()
    errs = []
    for pair in val_data:
        ft, ft1 = pair_tensors(pair, model.dtype)
        out = model(ft, ft1)
        if branch == "segmentation":
            errs.append(1.0 - region_similarity(out.masks()[0], pair.mask_gt))
        else:
            errs.append(average_endpoint_error(out.flow_pred[0].double().numpy(), pair.flow_gt, pair.flow_valid))
    model.train()
    return float(np.mean(errs))


def _snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _check_data(data: Sequence[FramePair], branch: str) -> None:
    if not data:
        raise ValueError(f"{branch} dataset is empty")
    attr = "mask_gt" if branch == "segmentation" else "flow_gt"
    if any(getattr(p, attr) is None for p in data):
        raise ValueError(f"{branch} training needs {attr} on every pair")


def _augment(pair: FramePair, rng: np.random.Generator, ranges: AffineRanges, tries: int = 5) -> FramePair:
    for _ in range(tries):
        out = apply_affine_pair(pair, sample_affine(rng, ranges, pair.size))
        if out.mask_gt is None or out.mask_gt.any() or not pair.mask_gt.any():
            if out.flow_valid is None or out.flow_valid.any():
                return out
    return pair


def _synthesize(pair: FramePair, rng: np.random.Generator, ranges: SynthesisRanges) -> FramePair:
    # swap the real next frame for one fabricated from the annotated object
    f1, flow, valid = synthesize_next_frame(pair.frame_t, pair.mask_gt, sample_synthesis(rng, ranges, pair.size))
    return FramePair(pair.frame_t, f1.astype(pair.frame_t.dtype), pair.mask_gt, flow, valid, name=pair.name)


def train_phase(model: SegFlowNet, branch: str, train_data: Sequence[FramePair], val_data: Sequence[FramePair],
                config: TrainConfig, round_index: int = 0, phase_seed: int | Sequence[int] = 0,
                augment: bool | None = None, affine_ranges: AffineRanges | None = None,
                logger: Callable[[str], None] | None = None) -> TrainState:
    """Train one branch until the validation error stops improving.

    Validation runs before the first step and every ``val_interval`` steps.
    The phase ends after ``patience`` evaluations without an improvement
    larger than ``min_delta`` or at ``max_steps_per_phase``; the model is
    left holding the weights of the lowest validation error seen.
    """
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    _check_data(train_data, branch)
    _check_data(val_data, branch)
    if augment is None:
        augment = config.seg_augmentation if branch == "segmentation" else config.flow_augmentation
    affine_ranges = affine_ranges or AffineRanges()
    synthesis_ranges = SynthesisRanges()
    rng = np.random.default_rng(phase_seed)
    lr0 = config.lr_seg if branch == "segmentation" else config.lr_flow

    activate_branch(model, branch)
    params = [p for p in model.branch_parameters(branch)]
    opt = torch.optim.SGD(params, lr=lr0, momentum=config.momentum)
    state = TrainState(round_index=round_index, active_branch=branch, lr_current=lr0)
    model.train()

    def evaluate(step: int, train_loss: float) -> float:
        err = validation_error(model, branch, val_data)
        state.val_history.append((step, err))
        if logger is not None:
            logger(f"round={round_index} branch={branch} step={step} lr={state.lr_current:.6g} "
                   f"train_loss={train_loss:.6g} val_error={err:.6g}")
        if err < state.best_error:
            state.best_error, state.best_step = err, step
            state.best_state = _snapshot(model)
        return err

    evaluate(0, float("nan"))
    ref = state.best_error
    stale = 0
    order = rng.permutation(len(train_data))
    cursor = 0
    running = []
    for step in range(config.max_steps_per_phase):
        lr = lr_at(step, lr0, config.halving_interval)
        for g in opt.param_groups:
            g["lr"] = lr
        state.lr_current = lr
        state.lr_history.append(lr)

        batch = []
        for _ in range(config.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(train_data)), 0
            pair = train_data[order[cursor]]
            cursor += 1
            if augment:
                pair = _augment(pair, rng, affine_ranges)
                if (branch == "flow" and pair.mask_gt is not None and pair.mask_gt.any()
                        and rng.random() < config.flow_synthesis):
                    pair = _synthesize(pair, rng, synthesis_ranges)
            batch.append(pair)

        loss = _branch_loss(model, branch, batch, config)
        if not torch.isfinite(loss):
            state.diverged = True
            state.diagnostic = f"non-finite {branch} loss at step {step} (lr={lr:.3g}); restored best checkpoint"
            log.warning(state.diagnostic)
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        running.append(loss.item())
        state.step = step + 1

        if state.step % config.val_interval == 0 or state.step == config.max_steps_per_phase:
            mean_loss = float(np.mean(running))
            state.train_history.append((state.step, mean_loss))
            running = []
            err = evaluate(state.step, mean_loss)
            if err < ref - config.min_delta:
                ref, stale = err, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    return state


def split_validation(data: Sequence[FramePair], fraction: float, seed) -> tuple[list[FramePair], list[FramePair]]:
    """Seeded random split; at least one pair lands on each side when possible."""
    data = list(data)
    if len(data) < 2:
        raise ValueError("need at least two pairs to split off a validation set")
    n_val = min(len(data) - 1, max(1, int(round(fraction * len(data)))))
    perm = np.random.default_rng(seed).permutation(len(data))
    val_idx = set(perm[:n_val].tolist())
    train = [p for i, p in enumerate(data) if i not in val_idx]
    val = [p for i, p in enumerate(data) if i in val_idx]
    return train, val


def _flatten(data) -> list[FramePair]:
    if isinstance(data, Mapping):
        return [p for seq in sorted(data) for p in data[seq]]
    return list(data)


def phase_schedule(config: TrainConfig) -> list[str]:
    second = "flow" if config.first_branch == "segmentation" else "segmentation"
    return [b for _ in range(config.rounds) for b in (config.first_branch, second)]


def offline_train(model: SegFlowNet, seg_dataset, flow_dataset, config: TrainConfig,
                  seg_val=None, flow_val=None, checkpoint_dir: str | Path | None = None,
                  logger: Callable[[str], None] | None = None,
                  affine_ranges: AffineRanges | None = None) -> tuple[SegFlowNet, list[TrainState]]:
    """Alternate segmentation and flow phases for ``config.rounds`` rounds.

    Each phase starts from the previous phase's best weights. With
    ``checkpoint_dir`` every finished phase is saved there and a rerun resumes
    after the last saved phase. Returns the model and one TrainState per phase
    (their val_history lists are the per-round validation curves).
    """
    seg_data, flow_data = _flatten(seg_dataset), _flatten(flow_dataset)
    _check_data(seg_data, "segmentation")
    _check_data(flow_data, "flow")
    if seg_val is None:
        seg_data, seg_val = split_validation(seg_data, config.val_fraction, [config.seed, 101])
    if flow_val is None:
        flow_data, flow_val = split_validation(flow_data, config.val_fraction, [config.seed, 202])
    seg_val, flow_val = _flatten(seg_val), _flatten(flow_val)

    schedule = phase_schedule(config)
    phases: list[TrainState] = []
    start = 0
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        done = sorted(ckdir.glob("phase*.pt"))
        if done:
            restored, extra = load_checkpoint(done[-1], return_extra=True)
            if restored.config != model.config:
                raise ValueError(f"checkpoint {done[-1]} was trained with a different model config")
            model.load_state_dict(restored.state_dict())
            phases = [TrainState.from_summary(s) for s in extra["phases"]]
            start = len(phases)
            log.info("resuming after phase %d from %s", start, done[-1])

    for i in range(start, len(schedule)):
        branch = schedule[i]
        data, val = (seg_data, seg_val) if branch == "segmentation" else (flow_data, flow_val)
        state = train_phase(model, branch, data, val, config, round_index=i // 2,
                            phase_seed=[config.seed, i], affine_ranges=affine_ranges, logger=logger)
        state.best_state = None
        phases.append(state)
        if ckdir is not None:
            path = ckdir / f"phase{i:02d}_{branch}.pt"
            state.checkpoint_path = str(path)
            save_checkpoint(model, path, extra={"phases": [s.summary() for s in phases]})
        if state.diverged:
            raise TrainingDiverged(state.diagnostic, state)
    for b in BRANCHES:
        unfreeze_branch(model, b)
    return model, phases


def best_errors_per_round(phases: Sequence[TrainState]) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {b: [] for b in BRANCHES}
    for s in phases:
        out[s.active_branch].append(s.best_error)
    return out


def online_finetune(model: SegFlowNet, first_frame: np.ndarray, first_mask: np.ndarray, config: TrainConfig,
                    affine_ranges: AffineRanges | None = None, synthesis_ranges: SynthesisRanges | None = None,
                    return_state: bool = False):
    """Adapt a copy of ``model`` to one object from its first-frame mask.

    The frame is expanded with ``augment_dataset`` and only the segmentation
    branch trains, at the constant rate ``lr_online``; flow weights stay fixed.
    """
    if not np.asarray(first_mask).any():
        raise ValueError("first-frame mask is empty")
    model = copy.deepcopy(model)
    rng = np.random.default_rng([config.seed, 999])
    pairs = augment_dataset(first_frame, first_mask, config.online_samples, rng,
                            affine_ranges=affine_ranges, synthesis_ranges=synthesis_ranges,
                            seg_augmentation=config.seg_augmentation,
                            flow_augmentation=config.flow_augmentation)
    activate_branch(model, "segmentation")
    params = list(model.branch_parameters("segmentation"))
    opt = torch.optim.SGD(params, lr=config.lr_online, momentum=config.momentum)
    state = TrainState(round_index=0, active_branch="segmentation", lr_current=config.lr_online)
    model.train()
    order = rng.permutation(len(pairs))
    cursor = 0
    for step in range(config.online_steps):
        batch = []
        for _ in range(config.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(pairs)), 0
            batch.append(pairs[order[cursor]])
            cursor += 1
        loss = _branch_loss(model, "segmentation", batch, config)
        if not torch.isfinite(loss):
            state.diverged = True
            state.diagnostic = f"non-finite loss at online step {step}"
            raise TrainingDiverged(state.diagnostic, state)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        state.step = step + 1
        state.lr_history.append(opt.param_groups[0]["lr"])
        state.train_history.append((state.step, loss.item()))
    unfreeze_branch(model, "flow")
    model.eval()
    if return_state:
        return model, state
    return model
