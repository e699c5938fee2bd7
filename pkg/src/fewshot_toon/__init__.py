"""Few-shot, group-aware face-to-cartoon translation with selective backpropagation."""

from .branches import GradientReport, ParamPartition, graft, partition, routed_loss_backward
from .checkpoint import Checkpoint, export_attention, load, save
from .config import (
    AugmentConfig,
    Direction,
    Domain,
    LossWeights,
    ModelConfig,
    RunMeta,
    SplitConfig,
    TrainConfig,
)
from .losses import FaceEmbedder, LossBundle, total_d, total_g
from .model import BranchedGenerator, CartoonGAN, DetachPolicy, Discriminator, adalin

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BranchedGenerator",
    "CartoonGAN",
    "Checkpoint",
    "DetachPolicy",
    "Direction",
    "Discriminator",
    "Domain",
    "FaceEmbedder",
    "GradientReport",
    "LossBundle",
    "LossWeights",
    "ModelConfig",
    "ParamPartition",
    "RunMeta",
    "SplitConfig",
    "TrainConfig",
    "adalin",
    "export_attention",
    "graft",
    "load",
    "partition",
    "routed_loss_backward",
    "save",
    "total_d",
    "total_g",
]
