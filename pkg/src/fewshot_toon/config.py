"""Configuration records and small shared types."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Any


class Domain(str, enum.Enum):
    REAL = "real"
    CARTOON = "cartoon"

    @property
    def other(self) -> "Domain":
        return Domain.CARTOON if self is Domain.REAL else Domain.REAL


class Direction(str, enum.Enum):
    REAL2CARTOON = "real2cartoon"
    CARTOON2REAL = "cartoon2real"

    @property
    def source(self) -> Domain:
        return Domain.REAL if self is Direction.REAL2CARTOON else Domain.CARTOON

    @property
    def target(self) -> Domain:
        return self.source.other

    @property
    def reverse(self) -> "Direction":
        if self is Direction.REAL2CARTOON:
            return Direction.CARTOON2REAL
        return Direction.REAL2CARTOON


class ToonError(Exception):
    """Base class for errors raised by this package."""


class RegistryError(ToonError, KeyError):
    """Unknown or duplicate group id."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ShapeError(ToonError, ValueError):
    pass


class ContractError(ToonError, ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters shared by both generators and both critics."""

    img_size: int = 256
    ngf: int = 64
    ndf: int = 64
    n_down: int = 2
    n_res: int = 4
    n_hourglass: int = 0
    disc_layers: int = 5
    embed_dim: int = 128
    # pool the attended map before the gamma/beta MLP instead of flattening it
    light: bool = False

    def __post_init__(self) -> None:
        factor = 2**self.n_down
        if self.img_size < 16:
            raise ContractError(f"img_size {self.img_size} below minimum 16")
        if self.img_size % factor:
            raise ContractError(f"img_size {self.img_size} not divisible by downsampling factor {factor}")
        if self.n_res < 1:
            raise ContractError("n_res must be >= 1")
        if self.img_size % (2**self.disc_layers) or self.img_size // 2**self.disc_layers < 3:
            raise ContractError(
                f"{self.disc_layers} critic layers leave no patch map at img_size {self.img_size}"
            )

    @property
    def feature_size(self) -> int:
        return self.img_size // 2**self.n_down

    @property
    def feature_channels(self) -> int:
        return self.ngf * 2**self.n_down

    @property
    def n_enc_blocks(self) -> int:
        # input conv + hourglasses + downsampling blocks + residual blocks
        return 1 + self.n_hourglass + self.n_down + self.n_res

    @property
    def n_dec_blocks(self) -> int:
        # AdaLIN residual blocks + upsampling blocks + hourglasses + output conv
        return self.n_res + self.n_down + self.n_hourglass + 1


@dataclass(frozen=True)
class SplitConfig:
    """How many encoder blocks (from the input) and decoder blocks (from the output)
    belong to each group's private branch. ``None`` means the whole resolution-changing
    stack, so the shared region is the residual/CAM/AdaLIN core."""

    n_enc_specific: int | None = None
    n_dec_specific: int | None = None

    def resolve(self, cfg: ModelConfig) -> tuple[int, int]:
        enc = 1 + cfg.n_hourglass + cfg.n_down if self.n_enc_specific is None else self.n_enc_specific
        dec = 1 + cfg.n_hourglass + cfg.n_down if self.n_dec_specific is None else self.n_dec_specific
        if not 0 <= enc <= cfg.n_enc_blocks:
            raise ContractError(f"n_enc_specific={enc} outside [0, {cfg.n_enc_blocks}]")
        if not 0 <= dec <= cfg.n_dec_blocks:
            raise ContractError(f"n_dec_specific={dec} outside [0, {cfg.n_dec_blocks}]")
        return enc, dec

    def deeper(self, cfg: ModelConfig, enc: int = 1, dec: int = 0) -> "SplitConfig":
        e, d = self.resolve(cfg)
        return SplitConfig(e + enc, d + dec)


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    cycle: float = 10.0
    identity: float = 10.0
    cam: float = 1000.0
    face: float = 1.0
    cls: float = 100.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ContractError(f"loss weight {f.name} must be nonnegative")


@dataclass(frozen=True)
class AugmentConfig:
    resize: int = 286
    crop: int = 256
    horizontal_flip_prob: float = 0.5

    def __post_init__(self) -> None:
        if self.crop > self.resize:
            raise ContractError(f"crop {self.crop} exceeds resize {self.resize}")


STAGES = ("basic", "fewshot")
ABLATIONS = ("default", "mixed", "finetune_all", "no_selective")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weight_decay: float = 1e-4
    resize: int = 286
    crop: int = 256
    init_std: float = 0.02
    iterations: int = 1000
    seed: int = 0
    stage: str = "basic"
    ablation_mode: str = "default"
    flip_prob: float = 0.5
    checkpoint_every: int = 0
    embedder_seed: int = 1234

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        if self.crop > self.resize:
            raise ContractError(f"crop {self.crop} exceeds resize {self.resize}")
        if self.iterations < 0:
            raise ContractError("iterations must be nonnegative")
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.ablation_mode not in ABLATIONS:
            raise ContractError(f"unknown ablation mode {self.ablation_mode!r}")

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.resize, self.crop, self.flip_prob)


def to_dict(obj: Any) -> dict[str, Any]:
    return dataclasses.asdict(obj)


def from_dict(cls: type, data: dict[str, Any] | None):
    """Build a dataclass from a dict, ignoring unknown keys."""
    data = data or {}
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})


@dataclass
class RunMeta:
    """Everything besides parameter blobs that a checkpoint records."""

    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    group_ids: list[int] = field(default_factory=lambda: [0])
    branch_for: dict[int, int] = field(default_factory=lambda: {0: 0})
    stage: str = "basic"
    seed: int = 0
    step: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "model": to_dict(self.model),
            "split": to_dict(self.split),
            "weights": to_dict(self.weights),
            "group_ids": list(self.group_ids),
            "branch_for": {str(k): v for k, v in self.branch_for.items()},
            "stage": self.stage,
            "seed": self.seed,
            "step": self.step,
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "RunMeta":
        return cls(
            model=from_dict(ModelConfig, d["model"]),
            split=from_dict(SplitConfig, d["split"]),
            weights=from_dict(LossWeights, d["weights"]),
            group_ids=[int(g) for g in d["group_ids"]],
            branch_for={int(k): int(v) for k, v in d["branch_for"].items()},
            stage=d.get("stage", "basic"),
            seed=int(d.get("seed", 0)),
            step=int(d.get("step", 0)),
            extra=d.get("extra", {}),
        )
