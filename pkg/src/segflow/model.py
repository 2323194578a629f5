"""Two-branch segmentation/flow network with bi-directional feature fusion."""
from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from segflow.config import ModelConfig
from segflow.types import FeaturePyramid, FramePair, SegFlowOutput, ShapeError

SEG_TAP_SCALES = (8, 16, 32)
BRANCHES = ("segmentation", "flow")
CHECKPOINT_FORMAT = "segflow-checkpoint/1"
FUSION_INIT_GAIN = 0.1
INPUT_MEAN = 0.5
NORM_GROUPS = 8


class CheckpointError(RuntimeError):
    pass


def _generator(seed: int, tag: str) -> torch.Generator:
    # independent streams per sub-network so toggling fusion leaves branch weights unchanged
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def _he_init(module: nn.Module, g: torch.Generator, gain: float = 1.0) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.normal_(0.0, gain * math.sqrt(2.0 / fan_in), generator=g)
                if m.bias is not None:
                    m.bias.zero_()


def _zero_heads(module: nn.Module) -> None:
    # prediction layers start at zero: uniform foreground odds and zero flow
    for m in module.modules():
        if isinstance(m, SegmentationBranch):
            for conv in m.score.values():
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)
        elif isinstance(m, FlowBranch):
            nn.init.zeros_(m.predict.weight)
            nn.init.zeros_(m.predict.bias)


def resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize; a no-op when the size already matches."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def norm(channels: int) -> nn.GroupNorm:
    # batch-independent normalisation, so batch size 1 trains like any other;
    # groups keep two channels where possible so 1x1 maps still normalise
    groups = max(g for g in range(1, NORM_GROUPS + 1) if channels % g == 0 and (channels // g >= 2 or g == 1))
    return nn.GroupNorm(groups, channels)


def conv_norm_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), norm(cout), nn.ReLU())


class ConvModule(nn.Module):
    """Two 3x3 convolutions with a projected residual link, then 2x2 max pooling."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = norm(cout)
        self.skip = nn.Conv2d(cin, cout, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.pool(F.relu(y + self.skip(x)))


class SegmentationBranch(nn.Module):
    """Five convolution modules (strides to 1/2 ... 1/32) with score taps on modules 3-5."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.encoder_channels
        ins = (3,) + tuple(chans[:-1])
        self.blocks = nn.ModuleList(ConvModule(i, o) for i, o in zip(ins, chans))
        # taps: module 3 -> 1/8, module 4 -> 1/16, module 5 -> 1/32
        self.score = nn.ModuleDict({str(s): nn.Conv2d(chans[k], 2, 1) for s, k in zip(SEG_TAP_SCALES, (2, 3, 4))})
        self.input_size = config.input_size

    def encode(self, frame: torch.Tensor) -> FeaturePyramid:
        levels = {}
        x = frame
        for k, block in enumerate(self.blocks):
            x = block(x)
            levels[2 ** (k + 1)] = x
        return FeaturePyramid(levels, input_size=tuple(frame.shape[-2:]))

    def head(self, pyramid: FeaturePyramid) -> torch.Tensor:
        size = self.input_size
        logits = 0
        for s in SEG_TAP_SCALES:
            logits = logits + resample(self.score[str(s)](pyramid[s]), size)
        return logits

    def forward(self, frame):
        return self.head(self.encode(frame))


class FlowBranch(nn.Module):
    """Encoder-decoder on the stacked frame pair with same-scale skip concatenations."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.flow_channels
        ins = (6,) + tuple(chans[:-1])
        self.encoder = nn.ModuleList(
            nn.Sequential(*conv_norm_relu(i, o, stride=2), *conv_norm_relu(o, o)) for i, o in zip(ins, chans)
        )
        # decoder steps at 1/16, 1/8, 1/4, 1/2; each sees upsampled coarser features + encoder skip
        self.decoder = nn.ModuleDict()
        for k in (3, 2, 1, 0):
            scale = 2 ** (k + 1)
            self.decoder[str(scale)] = conv_norm_relu(chans[k + 1] + chans[k], chans[k])
        self.predict = nn.Conv2d(chans[0], 2, 3, padding=1)
        self.input_size = config.input_size

    def encode(self, pair: torch.Tensor) -> FeaturePyramid:
        levels = {}
        x = pair
        for k, step in enumerate(self.encoder):
            x = step(x)
            levels[2 ** (k + 1)] = x
        return FeaturePyramid(levels, input_size=tuple(pair.shape[-2:]))

    def decode_step(self, scale: int, coarser: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        up = resample(coarser, tuple(skip.shape[-2:]))
        return self.decoder[str(scale)](torch.cat([up, skip], dim=1))

    def head(self, finest: torch.Tensor) -> torch.Tensor:
        return resample(self.predict(finest), self.input_size)

    def forward(self, pair):
        enc = self.encode(pair)
        x = enc[32]
        for scale in (16, 8, 4, 2):
            x = self.decode_step(scale, x, enc[scale])
        return self.head(x)


class FusionConv(nn.Module):
    """Concatenate the partner's features onto the receiver's and restore the receiver's width.

    The convolution output is added to the receiving features, so a zeroed
    convolution is an exact pass-through.
    """

    def __init__(self, recv_channels: int, other_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(recv_channels + other_channels, recv_channels, 3, padding=1)

    def forward(self, recv: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        other = resample(other, tuple(recv.shape[-2:]))
        return recv + self.conv(torch.cat([recv, other], dim=1))


class BidirectionalFusion(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.scales = tuple(config.fusion_scales) if config.fusion_enabled else ()
        seg_c = dict(zip((2, 4, 8, 16, 32), config.encoder_channels))
        flow_c = dict(zip((2, 4, 8, 16, 32), config.flow_channels))
        self.into_seg = nn.ModuleDict({str(s): FusionConv(seg_c[s], flow_c[s]) for s in self.scales})
        self.into_flow = nn.ModuleDict({str(s): FusionConv(flow_c[s], seg_c[s]) for s in self.scales})

    def fuse_level(self, scale: int, seg_feat: torch.Tensor, flow_feat: torch.Tensor):
        if scale not in self.scales:
            return seg_feat, flow_feat
        key = str(scale)
        return self.into_seg[key](seg_feat, flow_feat), self.into_flow[key](flow_feat, seg_feat)

    def forward(self, seg_pyramid: FeaturePyramid, flow_pyramid: FeaturePyramid):
        seg_levels = dict(seg_pyramid.levels)
        flow_levels = dict(flow_pyramid.levels)
        for s in self.scales:
            if s not in seg_levels or s not in flow_levels:
                raise ShapeError(f"fusion scale 1/{s} missing from a pyramid")
            seg_levels[s], flow_levels[s] = self.fuse_level(s, seg_levels[s], flow_levels[s])
        return (FeaturePyramid(seg_levels, seg_pyramid.input_size),
                FeaturePyramid(flow_levels, flow_pyramid.input_size))


class SegFlowNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.seg = SegmentationBranch(config)
        self.flow = FlowBranch(config)
        self.fusion = BidirectionalFusion(config)
        _he_init(self.seg, _generator(config.seed, "segmentation"))
        _he_init(self.flow, _generator(config.seed, "flow"))
        # bridges start close to a pass-through so fusion does not swamp either branch at init
        _he_init(self.fusion, _generator(config.seed, "fusion"), gain=FUSION_INIT_GAIN)
        _zero_heads(self)

    def forward(self, frame_t: torch.Tensor, frame_t1: torch.Tensor) -> SegFlowOutput:
        h, w = self.config.input_size
        if frame_t.shape[-2:] != (h, w) or frame_t1.shape != frame_t.shape:
            raise ShapeError(f"expected frames of size {(h, w)}, got {tuple(frame_t.shape)} / {tuple(frame_t1.shape)}")
        # frames arrive in [0, 1]; centre them
        frame_t, frame_t1 = frame_t - INPUT_MEAN, frame_t1 - INPUT_MEAN
        seg_pyr = self.seg.encode(frame_t)
        enc = self.flow.encode(torch.cat([frame_t, frame_t1], dim=1))

        # coarse to fine: fuse at 1/32 (flow bottleneck), then at each decoder step
        seg_levels = dict(seg_pyr.levels)
        x = enc[32]
        seg_levels[32], x = self.fusion.fuse_level(32, seg_levels[32], x)
        for scale in (16, 8, 4, 2):
            x = self.flow.decode_step(scale, x, enc[scale])
            if scale in seg_levels:
                seg_levels[scale], x = self.fusion.fuse_level(scale, seg_levels[scale], x)
        seg_logits = self.seg.head(FeaturePyramid(seg_levels))
        return SegFlowOutput(seg_logits=seg_logits, flow_pred=self.flow.head(x))

    def branch_parameters(self, branch: str) -> Iterator[nn.Parameter]:
        """Parameters owned by a branch; fusion convolutions belong to the branch they feed."""
        if branch == "segmentation":
            yield from self.seg.parameters()
            yield from self.fusion.into_seg.parameters()
        elif branch == "flow":
            yield from self.flow.parameters()
            yield from self.fusion.into_flow.parameters()
        else:
            raise ValueError(f"unknown branch {branch!r}")

    def branch_parameter_names(self, branch: str) -> list[str]:
        ids = {id(p) for p in self.branch_parameters(branch)}
        return [n for n, p in self.named_parameters() if id(p) in ids]

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def predict(self, pair: FramePair) -> SegFlowOutput:
        return forward(self, pair)


def build_model(config: ModelConfig) -> SegFlowNet:
    return SegFlowNet(config)


def build_segmentation_branch(config: ModelConfig) -> SegmentationBranch:
    branch = SegmentationBranch(config)
    _he_init(branch, _generator(config.seed, "segmentation"))
    _zero_heads(branch)
    return branch


def build_flow_branch(config: ModelConfig) -> FlowBranch:
    branch = FlowBranch(config)
    _he_init(branch, _generator(config.seed, "flow"))
    _zero_heads(branch)
    return branch


def fuse_bidirectional(seg_pyramid: FeaturePyramid, flow_pyramid: FeaturePyramid,
                       fusion: BidirectionalFusion, config: ModelConfig):
    if not config.fusion_enabled:
        return seg_pyramid, flow_pyramid
    return fusion(seg_pyramid, flow_pyramid)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def pair_tensors(pairs: list[FramePair] | FramePair, dtype=torch.float32):
    if isinstance(pairs, FramePair):
        pairs = [pairs]
    ft = torch.from_numpy(np.stack([p.frame_t for p in pairs])).to(dtype)
    ft1 = torch.from_numpy(np.stack([p.frame_t1 for p in pairs])).to(dtype)
    return ft, ft1


def forward(model: SegFlowNet, pair: FramePair) -> SegFlowOutput:
    """Run the network on one pair (returned tensors keep a batch axis of 1)."""
    pair.validate(model.config.input_size)
    ft, ft1 = pair_tensors(pair, model.dtype)
    return model(ft, ft1)


def save_checkpoint(model: SegFlowNet, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, return_extra: bool = False):
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupt archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a segflow checkpoint")
    config = ModelConfig.from_dict(payload["config"])
    if config.config_hash() != payload["config_hash"]:
        raise CheckpointError(f"config hash mismatch in {path}")
    model = SegFlowNet(config)
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    if return_extra:
        return model, payload.get("extra", {})
    return model
