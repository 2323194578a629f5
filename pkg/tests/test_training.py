import numpy as np
import pytest
import torch

from segflow.config import ModelConfig, TrainConfig
from segflow.data import ShapeObject, ShapeSceneSpec, render_scene, synthetic_corpus
from segflow.model import build_model
from segflow.training import (
    TrainingDiverged,
    _branch_loss,
    activate_branch,
    best_errors_per_round,
    lr_at,
    offline_train,
    online_finetune,
    phase_schedule,
    split_validation,
    train_phase,
)

SMALL = ModelConfig(encoder_channels=(4, 8, 8, 8, 8), flow_channels=(4, 8, 8, 8, 8))


@pytest.fixture(scope="module")
def pairs():
    return [p for seq in synthetic_corpus(2, seed=7, frames=4).values() for p in seq]


def quick(**kw):
    base = dict(max_steps_per_phase=6, val_interval=2, patience=100, rounds=1,
                seg_reduction="mean", flow_reduction="mean", lr_seg=1e-2, lr_flow=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule_halves_exactly():
    assert lr_at(0, 1e-4, 500) == 1e-4
    assert lr_at(499, 1e-4, 500) == 1e-4
    assert lr_at(500, 1e-4, 500) == 5e-5
    assert lr_at(1000, 1e-4, 500) == 2.5e-5
    for step in range(0, 5000, 37):
        assert lr_at(step, 0.3, 250) == 0.3 * 2.0 ** -(step // 250)


def test_phase_history_records_schedule(pairs):
    state = train_phase(build_model(SMALL), "segmentation", pairs, pairs[:2], quick(halving_interval=2))
    assert state.lr_history == [1e-2, 1e-2, 5e-3, 5e-3, 2.5e-3, 2.5e-3]


def test_freeze_semantics_leave_other_branch_untouched(pairs):
    model = build_model(SMALL)
    activate_branch(model, "segmentation")
    assert all(not p.requires_grad for p in model.branch_parameters("flow"))
    assert all(p.requires_grad for p in model.branch_parameters("segmentation"))
    activate_branch(model, "flow")
    _branch_loss(model, "flow", pairs[:2], quick()).backward()
    for n, p in model.named_parameters():
        if n in set(model.branch_parameter_names("segmentation")):
            assert p.grad is None, n
    assert all(p.grad is not None for p in model.branch_parameters("flow"))
    model.zero_grad(set_to_none=True)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train_phase(model, "flow", pairs, pairs[:2], quick())
    for n in model.branch_parameter_names("segmentation"):
        assert torch.equal(model.get_parameter(n), before[n]), n


def test_patience_stops_after_stale_evaluations(pairs):
    # min_delta larger than any possible gain: every evaluation after the first is stale
    cfg = quick(patience=2, min_delta=10.0, max_steps_per_phase=100)
    state = train_phase(build_model(SMALL), "segmentation", pairs, pairs[:2], cfg)
    assert len(state.val_history) == 1 + cfg.patience
    assert state.step == cfg.patience * cfg.val_interval


def test_best_checkpoint_is_restored(pairs):
    model = build_model(SMALL)
    state = train_phase(model, "flow", pairs, pairs[:3], quick(max_steps_per_phase=8))
    from segflow.training import validation_error
    assert validation_error(model, "flow", pairs[:3]) == pytest.approx(state.best_error, abs=1e-12)
    assert state.best_error == min(e for _, e in state.val_history)


def test_training_reduces_loss_on_a_fixed_pair(pairs):
    model = build_model(SMALL)
    one = [p for p in pairs if p.mask_gt.any()][:1]
    cfg = quick(max_steps_per_phase=60, val_interval=20, lr_seg=0.03, momentum=0.9, seg_augmentation=False)
    state = train_phase(model, "segmentation", one, one, cfg)
    losses = [l for _, l in state.train_history]
    assert losses[-1] < losses[0]


def test_schedule_and_offline_rounds(pairs):
    cfg = quick(rounds=3, max_steps_per_phase=2, val_interval=1)
    assert phase_schedule(cfg) == ["segmentation", "flow"] * 3
    assert phase_schedule(quick(first_branch="flow", rounds=1)) == ["flow", "segmentation"]
    _, phases = offline_train(build_model(SMALL), pairs, pairs, cfg)
    assert [s.active_branch for s in phases] == ["segmentation", "flow"] * 3
    assert [s.round_index for s in phases] == [0, 0, 1, 1, 2, 2]
    best = best_errors_per_round(phases)
    assert len(best["segmentation"]) == len(best["flow"]) == 3


def test_empty_flow_dataset_rejected(pairs):
    with pytest.raises(ValueError):
        offline_train(build_model(SMALL), pairs, [], quick())


def test_split_validation_is_seeded_and_disjoint(pairs):
    tr, va = split_validation(pairs, 0.25, 3)
    tr2, va2 = split_validation(pairs, 0.25, 3)
    assert [p.name for p in va] == [p.name for p in va2]
    assert not {p.name for p in tr} & {p.name for p in va}
    assert len(tr) + len(va) == len(pairs)


def test_resume_continues_after_saved_phases(pairs, tmp_path):
    cfg = quick(rounds=2, max_steps_per_phase=2, val_interval=1)
    full, phases = offline_train(build_model(SMALL), pairs, pairs, cfg, checkpoint_dir=tmp_path / "a")
    # simulate an interruption after two phases
    offline_train(build_model(SMALL), pairs, pairs, quick(rounds=1, max_steps_per_phase=2, val_interval=1),
                  checkpoint_dir=tmp_path / "b")
    resumed, phases_b = offline_train(build_model(SMALL), pairs, pairs, cfg, checkpoint_dir=tmp_path / "b")
    assert len(phases_b) == 4
    for (n, p), (_, q) in zip(full.named_parameters(), resumed.named_parameters()):
        assert torch.equal(p, q), n


def test_divergence_is_reported(pairs):
    with pytest.raises(TrainingDiverged) as info:
        offline_train(build_model(SMALL), pairs, pairs, quick(lr_seg=1e30, max_steps_per_phase=20, grad_clip=None))
    assert info.value.state.diverged and "non-finite" in info.value.state.diagnostic


def test_online_finetune_contract():
    spec = ShapeSceneSpec(canvas=(64, 64), background_seed=2, frames=2, objects=[
        ShapeObject("rectangle", (24.0, 30.0), (8.0, 6.0), velocity=(1.0, 0.0))])
    scene = render_scene(spec)
    model = build_model(SMALL)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    cfg = quick(online_steps=5, online_samples=4, lr_online=1e-3)
    tuned, state = online_finetune(model, scene.frames[0], scene.masks[0], cfg, return_state=True)
    assert state.lr_history == [1e-3] * 5
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n])  # the offline model is left alone
    flow_names = set(tuned.branch_parameter_names("flow"))
    for n, p in tuned.named_parameters():
        if n in flow_names:
            assert torch.equal(p, before[n])
    assert any(not torch.equal(p, before[n]) for n, p in tuned.named_parameters() if n not in flow_names)
    with pytest.raises(ValueError):
        online_finetune(model, scene.frames[0], np.zeros((64, 64)), cfg)
