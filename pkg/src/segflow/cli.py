"""Command-line entry point: ``segflow gen-data | train | finetune | eval | viz``.

Every command resolves one RunConfig (defaults < ``--config`` YAML < flags),
writes it as ``run_config.yaml`` into the output directory and can be rerun
from that file alone.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import click
import numpy as np
import torch
import yaml

from segflow.config import AffineRanges, ConfigError, ModelConfig, SynthesisRanges, TrainConfig
from segflow.data import (
    FloError,
    MissingAnnotationError,
    SceneSpecError,
    SequenceDataset,
    flow_to_color,
    generate_corpus,
    load_davis_layout,
    load_flow_dataset,
    load_mask,
)
from segflow.metrics import EvalReport, evaluate_model, evaluate_sequence
from segflow.model import CheckpointError, build_model, forward, load_checkpoint, save_checkpoint
from segflow.training import TrainingDiverged, best_errors_per_round, offline_train, online_finetune
from segflow.types import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
CONFIG_NAME = "run_config.yaml"

log = logging.getLogger("segflow")


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    n_train: int = 20
    n_val: int = 5
    frames: int = 8
    canvas: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        if self.n_train < 1 or self.n_val < 0 or self.frames < 2:
            raise ConfigError("need n_train >= 1, n_val >= 0 and frames >= 2")


@dataclass(frozen=True)
class Ablation:
    disable_fusion: bool = False
    disable_online: bool = False
    disable_offline: bool = False
    disable_iterative: bool = False
    disable_seg_augmentation: bool = False
    disable_flow_augmentation: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    affine: AffineRanges = field(default_factory=AffineRanges)
    synthesis: SynthesisRanges = field(default_factory=SynthesisRanges)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: Ablation = field(default_factory=Ablation)
    seed: int = 0
    out: str = "runs"

    _SECTIONS = {"model": ModelConfig, "train": TrainConfig, "affine": AffineRanges,
                 "synthesis": SynthesisRanges, "data": DataConfig, "ablation": Ablation}

    def to_dict(self) -> dict[str, Any]:
        d = {}
        for name in self._SECTIONS:
            section = asdict(getattr(self, name))
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        d["seed"] = self.seed
        d["out"] = self.out
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls._SECTIONS) - {"seed", "out"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for name, kind in cls._SECTIONS.items():
            section = data.get(name) or {}
            known = {f.name for f in fields(kind)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kw[name] = kind(**section)
        for key in ("seed", "out"):
            if key in data:
                kw[key] = data[key]
        return cls(**kw)

    def resolved(self) -> "RunConfig":
        """Push the global seed and ablation switches into the sections they control."""
        a = self.ablation
        model = replace(self.model, seed=self.seed, fusion_enabled=self.model.fusion_enabled and not a.disable_fusion)
        train = replace(self.train, seed=self.seed,
                        rounds=1 if a.disable_iterative else self.train.rounds,
                        seg_augmentation=self.train.seg_augmentation and not a.disable_seg_augmentation,
                        flow_augmentation=self.train.flow_augmentation and not a.disable_flow_augmentation)
        return replace(self, model=model, train=train)

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / CONFIG_NAME
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _set_nested(d: dict, dotted: str, value) -> None:
    section, key = dotted.split(".")
    d.setdefault(section, {})[key] = value


def _resolve(ctx: click.Context, overrides: dict[str, Any]) -> RunConfig:
    """Defaults < YAML file < global flags < command flags."""
    obj = ctx.obj
    base = {}
    if obj["config"] is not None:
        base = yaml.safe_load(Path(obj["config"]).read_text()) or {}
        if not isinstance(base, dict):
            raise ConfigError(f"{obj['config']} does not hold a mapping")
    for dotted, value in overrides.items():
        if value is not None:
            _set_nested(base, dotted, value)
    if obj["seed"] is not None:
        base["seed"] = obj["seed"]
    if obj["out"] is not None:
        base["out"] = obj["out"]
    return RunConfig.from_dict(base).resolved()


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _ablation_flags(fn):
    for name in reversed([f.name for f in fields(Ablation)]):
        flag = "--" + name.replace("_", "-")
        fn = click.option(flag, name, is_flag=True, default=None, help=f"ablation: {name.replace('_', ' ')}")(fn)
    return fn


def _ablation_overrides(kw: dict) -> dict:
    return {f"ablation.{f.name}": (True if kw.pop(f.name) else None) for f in fields(Ablation)}


def _data_root(cfg: RunConfig, data: str | None) -> Path:
    root = data or cfg.data.root
    if root is None:
        raise click.UsageError("no dataset given (--data or data.root in the config)")
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    return root


def _split(root: Path, name: str) -> Path:
    """Accept either a corpus root with train/val splits or a split directory itself."""
    return root / name if (root / name / "Images").exists() else root


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML run config")
@click.option("--seed", type=int, default=None, help="global seed (overrides the config)")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory")
@click.option("-v", "--verbose", is_flag=True, help="log progress to stderr")
@click.pass_context
def main(ctx, config, seed, out, verbose):
    """Joint video object segmentation and optical flow."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = {"config": config, "seed": seed, "out": out}


@main.command("gen-data")
@click.option("--n-train", type=int, default=None)
@click.option("--n-val", type=int, default=None)
@click.option("--frames", type=int, default=None)
@click.option("--size", type=int, default=None, help="square canvas side in pixels")
@click.pass_context
def gen_data(ctx, n_train, n_val, frames, size):
    """Render the synthetic moving-shapes corpus into <out>/train and <out>/val."""
    cfg = _resolve(ctx, {"data.n_train": n_train, "data.n_val": n_val, "data.frames": frames,
                         "data.canvas": [size, size] if size else None})
    out = Path(cfg.out)
    names = generate_corpus(out, cfg.data.n_train, cfg.data.n_val, cfg.seed,
                            canvas=cfg.data.canvas, frames=cfg.data.frames)
    cfg = replace(cfg, data=replace(cfg.data, root=str(out)))
    cfg.write(out)
    for split, seqs in names.items():
        click.echo(f"{split}: {len(seqs)} sequences, {len(seqs) * cfg.data.frames} frames, "
                   f"{len(seqs) * (cfg.data.frames - 1)} flow fields")


@main.command()
@click.option("--data", type=click.Path(), default=None, help="corpus root (with train/ and val/)")
@click.option("--rounds", type=int, default=None)
@click.option("--lr-seg", type=float, default=None)
@click.option("--lr-flow", type=float, default=None)
@click.option("--max-steps", type=int, default=None, help="cap on steps per phase")
@_ablation_flags
@click.pass_context
def train(ctx, data, rounds, lr_seg, lr_flow, max_steps, **kw):
    """Offline alternating training; resumes from phase checkpoints in <out>/checkpoints."""
    overrides = {"data.root": data, "train.rounds": rounds, "train.lr_seg": lr_seg, "train.lr_flow": lr_flow,
                 "train.max_steps_per_phase": max_steps, **_ablation_overrides(kw)}
    cfg = _resolve(ctx, overrides)
    root = _data_root(cfg, data)
    out = Path(cfg.out)
    cfg.write(out)
    _seed_everything(cfg.seed)
    model = build_model(cfg.model)
    if cfg.ablation.disable_offline:
        save_checkpoint(model, out / "model.pt", extra={"phases": []})
        click.echo("offline training disabled; saved the initial weights")
        return

    tr, va = _split(root, "train"), _split(root, "val")
    seg_val = flow_val = None
    if va != tr:
        seg_val, flow_val = list(load_davis_layout(va)), list(load_flow_dataset(va))
    logfile = (out / "train.log").open("a")

    def logger(line: str) -> None:
        logfile.write(line + "\n")
        logfile.flush()
        log.info(line)

    try:
        model, phases = offline_train(model, list(load_davis_layout(tr)), list(load_flow_dataset(tr)), cfg.train,
                                      seg_val=seg_val, flow_val=flow_val, checkpoint_dir=out / "checkpoints",
                                      logger=logger, affine_ranges=cfg.affine)
    finally:
        logfile.close()
    curves = {"phases": [s.summary() for s in phases], "best_per_round": best_errors_per_round(phases)}
    (out / "curves.json").write_text(json.dumps(curves, indent=2, sort_keys=True))
    save_checkpoint(model, out / "model.pt", extra=curves)
    for b, errs in curves["best_per_round"].items():
        click.echo(f"{b}: best validation error per round " + " ".join(f"{e:.4f}" for e in errs))


def _finetune_one(model, cfg: RunConfig, dataset: SequenceDataset, seq: str, mask_path: str | None):
    frame, mask = dataset.first_frame(seq) if mask_path is None else (
        dataset.first_frame_image(seq), _read_mask(mask_path))
    return online_finetune(model, frame, mask, cfg.train, cfg.affine, cfg.synthesis)


def _read_mask(path: str) -> np.ndarray:
    if not Path(path).exists():
        raise MissingAnnotationError(f"mask file {path} not found")
    return load_mask(path)


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data", type=click.Path(), default=None, help="split directory or corpus root")
@click.option("--split", default="val", show_default=True)
@click.option("--sequence", required=True)
@click.option("--mask", "mask_path", type=click.Path(), default=None, help="first-frame mask (default: annotation)")
@_ablation_flags
@click.pass_context
def finetune(ctx, checkpoint, data, split, sequence, mask_path, **kw):
    """Adapt the segmentation branch to one sequence from its first-frame mask."""
    cfg = _resolve(ctx, {"data.root": data, **_ablation_overrides(kw)})
    root = _split(_data_root(cfg, data), split)
    out = Path(cfg.out)
    cfg.write(out)
    _seed_everything(cfg.seed)
    model = load_checkpoint(checkpoint)
    dataset = SequenceDataset(root, with_masks=False, with_flow=False)
    if sequence not in dataset.sequences():
        raise FileNotFoundError(f"sequence {sequence} not found under {root}")
    if cfg.ablation.disable_online:
        click.echo("online fine-tuning disabled; copying the offline weights")
    else:
        model = _finetune_one(model, cfg, dataset, sequence, mask_path)
    save_checkpoint(model, out / f"{sequence}.pt")
    click.echo(f"wrote {out / f'{sequence}.pt'}")


def _oracle_report(root: Path, pred_dir: Path) -> EvalReport:
    gt = SequenceDataset(root, with_masks=True, with_flow=True)
    per_seq = {}
    for seq in gt.sequences():
        pairs = list(gt.pairs(seq))
        preds = []
        for p in pairs:
            frame = p.name.split("/")[-1]
            preds.append(_read_mask(str(pred_dir / seq / f"{frame}.png")))
        per_seq[seq] = evaluate_sequence(preds, [p.mask_gt for p in pairs], [p.flow_gt for p in pairs])
    return EvalReport.from_sequences(per_seq)


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--data", type=click.Path(), default=None, help="split directory or corpus root")
@click.option("--split", default="val", show_default=True)
@click.option("--flip-ensemble", is_flag=True, help="average with the mirrored prediction")
@click.option("--pred-dir", type=click.Path(file_okay=False), default=None,
              help="score precomputed masks <pred-dir>/<seq>/<frame>.png instead of running a model")
@_ablation_flags
@click.pass_context
def eval_cmd(ctx, checkpoint, data, split, flip_ensemble, pred_dir, **kw):
    """Score a checkpoint (fine-tuned per sequence unless disabled) and write report.{txt,json}."""
    cfg = _resolve(ctx, {"data.root": data, **_ablation_overrides(kw)})
    root = _split(_data_root(cfg, data), split)
    out = Path(cfg.out)
    cfg.write(out)
    _seed_everything(cfg.seed)
    if pred_dir is not None:
        report = _oracle_report(root, Path(pred_dir))
    else:
        if checkpoint is None:
            raise click.UsageError("eval needs --checkpoint or --pred-dir")
        offline = load_checkpoint(checkpoint)
        dataset = SequenceDataset(root, with_masks=True, with_flow=True)
        sequences = dataset.load_all()
        if cfg.ablation.disable_online:
            report = evaluate_model(offline, sequences, flip_ensemble=flip_ensemble)
        else:
            per_seq = {}
            for seq, pairs in sequences.items():
                tuned = _finetune_one(offline, cfg, dataset, seq, None)
                per_seq.update(evaluate_model(tuned, {seq: pairs}, flip_ensemble=flip_ensemble).per_sequence)
            report = EvalReport.from_sequences(per_seq)
    (out / "report.json").write_text(report.to_json())
    text = report.to_text()
    (out / "report.txt").write_text(text + "\n")
    click.echo(text)


def overlay(frame: np.ndarray, mask: np.ndarray, alpha: float, colour=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Blend a colour into the masked pixels of a (3, H, W) frame; returns uint8 HWC."""
    img = np.round(np.clip(frame, 0, 1) * 255).astype(np.float64).transpose(1, 2, 0)
    if alpha == 0:
        return img.astype(np.uint8)
    m = np.asarray(mask, bool)[..., None]
    tint = np.asarray(colour, np.float64) * 255
    blended = np.where(m, (1 - alpha) * img + alpha * tint, img)
    return np.round(blended).astype(np.uint8)


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data", type=click.Path(), default=None, help="split directory or corpus root")
@click.option("--split", default="val", show_default=True)
@click.option("--sequence", required=True)
@click.option("--frame", "frame_name", default=None, help="frame name (default: every pair)")
@click.option("--alpha", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.pass_context
def viz(ctx, checkpoint, data, split, sequence, frame_name, alpha):
    """Write <frame>_seg.png (mask overlay) and <frame>_flow.png (colour-coded flow)."""
    from PIL import Image

    cfg = _resolve(ctx, {"data.root": data})
    root = _split(_data_root(cfg, data), split)
    out = Path(cfg.out)
    cfg.write(out)
    model = load_checkpoint(checkpoint)
    dataset = SequenceDataset(root, with_masks=False, with_flow=False)
    if sequence not in dataset.sequences():
        raise FileNotFoundError(f"sequence {sequence} not found under {root}")
    written = 0
    with torch.no_grad():
        for pair in dataset.pairs(sequence):
            name = pair.name.split("/")[-1]
            if frame_name is not None and name != frame_name:
                continue
            pred = forward(model, pair)
            Image.fromarray(overlay(pair.frame_t, pred.masks()[0], alpha)).save(out / f"{name}_seg.png")
            flow = pred.flow_pred[0].double().numpy()
            Image.fromarray(flow_to_color(flow)).save(out / f"{name}_flow.png")
            written += 1
    if written == 0:
        raise FileNotFoundError(f"frame {frame_name} not found in {sequence}")
    click.echo(f"wrote {2 * written} images to {out}")


DATA_ERRORS = (FileNotFoundError, MissingAnnotationError, FloError, SceneSpecError, ShapeError, CheckpointError,
               NotADirectoryError, PermissionError, IsADirectoryError)


def run(argv: list[str] | None = None) -> int:
    """Invoke the CLI and map failures onto exit codes (0 ok, 1 usage, 2 data, 3 divergence)."""
    try:
        main.main(args=argv, prog_name="segflow", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        click.echo(f"training diverged: {exc}", err=True)
        return EXIT_DIVERGED
    except DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except yaml.YAMLError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    return EXIT_OK


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
