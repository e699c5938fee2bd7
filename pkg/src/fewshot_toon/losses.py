"""Loss families of the two-player objective and their weighted totals."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ContractError, LossWeights, RegistryError, ShapeError

EPS = 1e-7


def _nonempty(*ts: torch.Tensor) -> None:
    for t in ts:
        if t.numel() == 0:
            raise ContractError("empty logit map")


def adv_loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Least-squares critic loss: real patches toward 1, fake patches toward 0."""
    _nonempty(real_logits, fake_logits)
    return ((real_logits - 1) ** 2).mean() + (fake_logits**2).mean()


def adv_loss_g(fake_logits: torch.Tensor) -> torch.Tensor:
    _nonempty(fake_logits)
    return ((fake_logits - 1) ** 2).mean()


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    return _l1(x, x_reconstructed)


def identity_loss(x: torch.Tensor, t_of_x: torch.Tensor) -> torch.Tensor:
    return _l1(x, t_of_x)


def cam_loss_g(eta_src_on_source: torch.Tensor, eta_src_on_target: torch.Tensor) -> torch.Tensor:
    """Generator CAM loss on probabilities: source images toward 1, target images toward 0."""
    for eta in (eta_src_on_source, eta_src_on_target):
        with torch.no_grad():
            if bool((eta < 0).any() or (eta > 1).any() or torch.isnan(eta).any()):
                raise ContractError("CAM probabilities must lie in [0, 1]")
    src = eta_src_on_source.clamp(EPS, 1 - EPS)
    tgt = eta_src_on_target.clamp(EPS, 1 - EPS)
    return -(torch.log(src).mean() + torch.log(1 - tgt).mean())


def cam_loss_d(eta_d_real: torch.Tensor, eta_d_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares critic CAM loss on raw logits: real toward 1, fake toward 0."""
    return ((eta_d_real - 1) ** 2).mean() + (eta_d_fake**2).mean()


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    with torch.no_grad():
        if bool((na == 0).any() or (nb == 0).any()):
            raise ContractError("zero-norm embedding")
    return (1 - (a * b).sum(-1) / (na * nb)).mean()


def face_id_loss(x_s, y_fake, x_t, x_fake_back, embedder: "FaceEmbedder") -> torch.Tensor:
    """Cosine distance between embeddings of each image and its translation, both directions."""
    return cosine_distance(embedder(x_s), embedder(y_fake)) + cosine_distance(embedder(x_t), embedder(x_fake_back))


def group_cls_loss(group_logits: torch.Tensor, true_group: int | torch.Tensor) -> torch.Tensor:
    logits = group_logits if group_logits.dim() == 2 else group_logits.unsqueeze(0)
    n, g = logits.shape
    if isinstance(true_group, torch.Tensor):
        target = true_group.to(torch.long).reshape(-1).expand(n) if true_group.numel() == 1 else true_group.long()
    else:
        target = torch.full((n,), int(true_group), dtype=torch.long)
    if bool((target < 0).any() or (target >= g).any()):
        raise RegistryError(f"group {target.tolist()} out of range for {g} classes")
    return F.cross_entropy(logits, target)


@dataclass
class LossBundle:
    adv_g: torch.Tensor | float = 0.0
    adv_d: torch.Tensor | float = 0.0
    cycle: torch.Tensor | float = 0.0
    identity: torch.Tensor | float = 0.0
    cam_g: torch.Tensor | float = 0.0
    cam_d: torch.Tensor | float = 0.0
    face: torch.Tensor | float = 0.0
    cls_real: torch.Tensor | float = 0.0
    cls_fake: torch.Tensor | float = 0.0

    def __add__(self, other: "LossBundle") -> "LossBundle":
        return LossBundle(**{k: getattr(self, k) + getattr(other, k) for k in self.names()})

    @staticmethod
    def names() -> list[str]:
        return [f.name for f in dataclasses.fields(LossBundle)]

    def floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in self.names()}

    def check_finite(self) -> None:
        bad = [k for k, v in self.floats().items() if not math.isfinite(v)]
        if bad:
            raise FloatingPointError(f"non-finite loss components: {', '.join(bad)}")


def total_g(bundle: LossBundle, w: LossWeights | None = None):
    w = w or LossWeights()
    return (
        w.adv * bundle.adv_g
        + w.cycle * bundle.cycle
        + w.identity * bundle.identity
        + w.cam * bundle.cam_g
        + w.face * bundle.face
        + w.cls * bundle.cls_fake
    )


def total_d(bundle: LossBundle):
    # the critic CAM objective is trained jointly with the adversarial one
    return bundle.adv_d + bundle.cls_real + bundle.cam_d


class FaceEmbedder(nn.Module):
    """Frozen, seeded stand-in for a pretrained face-recognition network.

    Maps images in [-1, 1] to unit-norm vectors. Parameters never require grad,
    but gradients flow through to the input images.
    """

    def __init__(self, dim: int = 128, seed: int = 1234, width: int = 16) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(width * 4, dim),
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FaceEmbedder":
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=-1, eps=1e-12)
