"""Joint video object segmentation and optical flow with bi-directional feature fusion."""

from segflow.config import ModelConfig, TrainConfig
from segflow.types import FeaturePyramid, FramePair, SegFlowOutput
from segflow.model import SegFlowNet, build_model, forward, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "FeaturePyramid",
    "FramePair",
    "SegFlowOutput",
    "SegFlowNet",
    "build_model",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
