import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from segflow.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, RunConfig, overlay, run
from segflow.data import ShapeObject, ShapeSceneSpec, export_sequence, render_scene

TINY = {
    "model": {"encoder_channels": [4, 4, 8, 8, 8], "flow_channels": [4, 4, 8, 8, 8]},
    "train": {"rounds": 1, "max_steps_per_phase": 4, "val_interval": 2, "online_steps": 2, "online_samples": 3},
}


def tree_hash(root: Path, pattern="**/*") -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.glob(pattern)) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run(["--seed", "3", "--out", str(out), "gen-data", "--n-train", "3", "--n-val", "2", "--frames", "4"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_gen_data_layout_and_determinism(corpus, tmp_path):
    train = {p.name for p in (corpus / "train" / "Images").iterdir()}
    val = {p.name for p in (corpus / "val" / "Images").iterdir()}
    assert len(train) == 3 and len(val) == 2 and not train & val
    for seq in train:
        assert len(list((corpus / "train" / "Flow" / seq).glob("*.flo"))) == 3
    again = tmp_path / "again"
    assert run(["--seed", "3", "--out", str(again), "gen-data", "--n-train", "3", "--n-val", "2", "--frames", "4"]) == 0
    assert tree_hash(corpus, "*/**/*") == tree_hash(again, "*/**/*")


def test_run_config_round_trip():
    cfg = RunConfig.from_dict(TINY).resolved()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    off = RunConfig.from_dict({"ablation": {"disable_fusion": True, "disable_iterative": True}}).resolved()
    assert not off.model.fusion_enabled and off.train.rounds == 1


def test_usage_errors_exit_one(tmp_path):
    assert run(["no-such-command"]) == EXIT_USAGE
    assert run(["--out", str(tmp_path), "train"]) == EXIT_USAGE  # no dataset
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {nonsense: 1}\n")
    assert run(["--config", str(bad), "--out", str(tmp_path), "gen-data"]) == EXIT_USAGE


def test_train_eval_viz_finetune(corpus, tiny_config, tmp_path):
    base = ["--config", str(tiny_config), "--seed", "1"]
    run_dir = tmp_path / "train"
    assert run(base + ["--out", str(run_dir), "train", "--data", str(corpus), "--disable-fusion"]) == EXIT_OK
    assert (run_dir / "model.pt").exists() and (run_dir / "curves.json").exists()
    resolved = yaml.safe_load((run_dir / "run_config.yaml").read_text())
    assert resolved["model"]["fusion_enabled"] is False and resolved["seed"] == 1

    ckpt = run_dir / "model.pt"
    before = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    ev = tmp_path / "eval"
    assert run(base + ["--out", str(ev), "eval", "--checkpoint", str(ckpt), "--data", str(corpus),
                       "--flip-ensemble", "--disable-online"]) == EXIT_OK
    assert hashlib.sha256(ckpt.read_bytes()).hexdigest() == before
    report = json.loads((ev / "report.json").read_text())
    assert 0.0 <= report["J_mean"] <= 1.0
    assert "J Mean" in (ev / "report.txt").read_text()

    viz = tmp_path / "viz"
    seq = sorted(p.name for p in (corpus / "val" / "Images").iterdir())[0]
    assert run(base + ["--out", str(viz), "viz", "--checkpoint", str(ckpt), "--data", str(corpus),
                       "--sequence", seq, "--frame", "00000", "--alpha", "0"]) == EXIT_OK
    assert sorted(p.name for p in viz.glob("*.png")) == ["00000_flow.png", "00000_seg.png"]
    original = np.asarray(Image.open(corpus / "val" / "Images" / seq / "00000.png").convert("RGB"))
    assert np.array_equal(np.asarray(Image.open(viz / "00000_seg.png")), original)

    ft = tmp_path / "ft"
    assert run(base + ["--out", str(ft), "finetune", "--checkpoint", str(ckpt), "--data", str(corpus),
                       "--sequence", seq]) == EXIT_OK
    assert (ft / f"{seq}.pt").exists()
    assert run(base + ["--out", str(ft), "finetune", "--checkpoint", str(ckpt), "--data", str(corpus),
                       "--sequence", seq, "--mask", str(tmp_path / "missing.png")]) == EXIT_DATA


def test_resume_skips_finished_phases(corpus, tiny_config, tmp_path):
    args = ["--config", str(tiny_config), "--out", str(tmp_path), "train", "--data", str(corpus)]
    assert run(args) == EXIT_OK
    first = torch.load(tmp_path / "model.pt", weights_only=True)
    curves = (tmp_path / "curves.json").read_text()
    log_lines = (tmp_path / "train.log").read_text().count("\n")
    assert run(args) == EXIT_OK
    assert (tmp_path / "train.log").read_text().count("\n") == log_lines  # nothing retrained
    second = torch.load(tmp_path / "model.pt", weights_only=True)
    assert all(torch.equal(v, second["state_dict"][k]) for k, v in first["state_dict"].items())
    assert (tmp_path / "curves.json").read_text() == curves


def test_divergence_exit_code(corpus, tmp_path):
    cfg = tmp_path / "unclipped.yaml"
    cfg.write_text(yaml.safe_dump({"model": TINY["model"], "train": {**TINY["train"], "grad_clip": None}}))
    args = ["--config", str(cfg), "--out", str(tmp_path / "run"), "train", "--data", str(corpus),
            "--lr-seg", "1e30"]
    assert run(args) == EXIT_DIVERGED


def test_oracle_predictions_score_perfectly(tmp_path):
    # integer motion without rotation: ground-truth masks are transported exactly by the flow
    spec = ShapeSceneSpec(canvas=(64, 64), background_seed=1, frames=5, objects=[
        ShapeObject("rectangle", (20.0, 30.0), (6.0, 5.0), velocity=(2.0, 1.0)),
        ShapeObject("ellipse", (44.0, 20.0), (5.0, 5.0), velocity=(0.0, 0.0), foreground=False)])
    export_sequence(tmp_path / "data", "s0", render_scene(spec))
    preds = tmp_path / "preds" / "s0"
    preds.mkdir(parents=True)
    for m in (tmp_path / "data" / "Annotations" / "s0").glob("*.png"):
        (preds / m.name).write_bytes(m.read_bytes())
    out = tmp_path / "ev"
    assert run(["--out", str(out), "eval", "--data", str(tmp_path / "data"), "--pred-dir", str(preds.parent)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["J_mean"] == 1.0 and report["T_mean"] == 0.0


def test_overlay_and_missing_data(tmp_path):
    frame = np.random.default_rng(0).integers(0, 256, size=(3, 8, 8)) / 255.0
    mask = np.ones((8, 8))
    assert np.array_equal(overlay(frame, mask, 0.0), np.round(frame * 255).astype(np.uint8).transpose(1, 2, 0))
    assert overlay(frame, mask, 1.0)[..., 0].min() == 255
    assert run(["--out", str(tmp_path), "eval", "--data", str(tmp_path / "nowhere"), "--pred-dir", "x"]) == EXIT_DATA
