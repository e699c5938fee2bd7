"""Generator and critic networks: CAM attention, AdaLIN, multi-branch translator."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .config import ContractError, Direction, Domain, ModelConfig, RegistryError, ShapeError, SplitConfig

NORM_EPS = 1e-5


def instance_norm(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    mean = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (f - mean) / torch.sqrt(var + eps)


def layer_norm(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    mean = f.mean(dim=(1, 2, 3), keepdim=True)
    var = f.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (f - mean) / torch.sqrt(var + eps)


def adalin(
    f: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    rho: torch.Tensor,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Blend instance and layer normalization of ``f`` (N, C, H, W) per channel.

    ``rho`` weights the instance-normalized term; ``gamma`` and ``beta`` are either
    per-channel vectors of length C or per-sample (N, C) modulations.
    """
    c = f.shape[1]
    rho = rho.reshape(-1)
    if rho.numel() != c:
        raise ShapeError(f"rho has {rho.numel()} entries for {c} channels")
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeError(f"gamma/beta length must equal channel count {c}")
    with torch.no_grad():
        if bool((rho < 0).any() or (rho > 1).any()):
            raise ContractError("rho must lie in [0, 1]")
    rho = rho.view(1, c, 1, 1)
    mixed = rho * instance_norm(f, eps) + (1 - rho) * layer_norm(f, eps)
    return mixed * _channel_view(gamma, c) + _channel_view(beta, c)


def _channel_view(v: torch.Tensor, c: int) -> torch.Tensor:
    return v.reshape(-1, c, 1, 1)


class AdaLIN(nn.Module):
    """Holds the learnable mixing ratio; gamma/beta arrive from the style MLP."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.rho = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        return adalin(x, gamma, beta, self.rho)


class LIN(nn.Module):
    """Layer-instance norm with its own affine parameters (used in upsampling)."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.rho = nn.Parameter(torch.zeros(dim))
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adalin(x, self.gamma, self.beta, self.rho)


class InstanceNorm(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return instance_norm(x)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            InstanceNorm(),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            InstanceNorm(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class HourGlass(nn.Module):
    """Small symmetric hourglass with a residual skip. Optional; not in the default net."""

    def __init__(self, dim: int, depth: int = 2) -> None:
        super().__init__()
        self.depth = depth
        self.down = nn.ModuleList(_conv_in_relu(dim, dim) for _ in range(depth))
        self.skip = nn.ModuleList(_conv_in_relu(dim, dim) for _ in range(depth))
        self.up = nn.ModuleList(_conv_in_relu(dim, dim) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for i in range(self.depth):
            skips.append(self.skip[i](h))
            h = self.down[i](F.avg_pool2d(h, 2))
        for i in reversed(range(self.depth)):
            h = F.interpolate(self.up[i](h), scale_factor=2, mode="nearest") + skips[i]
        return x + h


def _conv_in_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(cin, cout, 3, bias=False), InstanceNorm(), nn.ReLU())


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int) -> None:
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(cin, cout, 3, bias=False)
        self.norm = LIN(cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(self.pad(x))))


class AdaLINResBlock(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.pad1 = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm1 = AdaLIN(dim)
        self.pad2 = nn.ReflectionPad2d(1)
        self.conv2 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm2 = AdaLIN(dim)

    def forward(self, x, gamma, beta):
        out = F.relu(self.norm1(self.conv1(self.pad1(x)), gamma, beta))
        out = self.norm2(self.conv2(self.pad2(out)), gamma, beta)
        return x + out


class Styled(nn.Module):
    """Adapts a plain block to the (x, gamma, beta) decoder calling convention."""

    def __init__(self, block: nn.Module) -> None:
        super().__init__()
        self.block = block

    def forward(self, x, gamma, beta):
        return self.block(x)


class CAMAttention(nn.Module):
    """Auxiliary domain classifier whose weights reweight the feature map.

    Returns the fused feature map, the two (avg-pool, max-pool) logits and a
    one-channel heatmap summed over the fused channels.
    """

    def __init__(self, dim: int, act: Callable[[torch.Tensor], torch.Tensor] = F.relu) -> None:
        super().__init__()
        self.gap_fc = nn.Linear(dim, 1, bias=False)
        self.gmp_fc = nn.Linear(dim, 1, bias=False)
        self.conv1x1 = nn.Conv2d(dim * 2, dim, 1)
        self.act = act

    def forward(self, x: torch.Tensor):
        n = x.shape[0]
        gap_logit = self.gap_fc(F.adaptive_avg_pool2d(x, 1).view(n, -1))
        gmp_logit = self.gmp_fc(F.adaptive_max_pool2d(x, 1).view(n, -1))
        gap = x * self.gap_fc.weight.view(1, -1, 1, 1)
        gmp = x * self.gmp_fc.weight.view(1, -1, 1, 1)
        cam_logit = torch.cat([gap_logit, gmp_logit], 1)
        x = self.act(self.conv1x1(torch.cat([gap, gmp], 1)))
        heatmap = x.sum(dim=1, keepdim=True)
        return x, cam_logit, heatmap


class StyleMLP(nn.Module):
    """Two fully connected layers on the attended features, then gamma/beta heads."""

    def __init__(self, dim: int, spatial: int, light: bool) -> None:
        super().__init__()
        self.light = light
        fan_in = dim if light else dim * spatial * spatial
        self.fc = nn.Sequential(nn.Linear(fan_in, dim), nn.ReLU(), nn.Linear(dim, dim), nn.ReLU())
        self.gamma = nn.Linear(dim, dim, bias=False)
        self.beta = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor):
        if self.light:
            x = F.adaptive_avg_pool2d(x, 1)
        h = self.fc(x.reshape(x.shape[0], -1))
        return self.gamma(h), self.beta(h)


def encoder_blocks(cfg: ModelConfig) -> list[nn.Module]:
    blocks: list[nn.Module] = [
        nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(3, cfg.ngf, 7, bias=False), InstanceNorm(), nn.ReLU())
    ]
    blocks += [HourGlass(cfg.ngf) for _ in range(cfg.n_hourglass)]
    for i in range(cfg.n_down):
        cin = cfg.ngf * 2**i
        blocks.append(
            nn.Sequential(
                nn.ReflectionPad2d(1), nn.Conv2d(cin, cin * 2, 3, stride=2, bias=False), InstanceNorm(), nn.ReLU()
            )
        )
    blocks += [ResnetBlock(cfg.feature_channels) for _ in range(cfg.n_res)]
    return blocks


def decoder_blocks(cfg: ModelConfig) -> list[nn.Module]:
    blocks: list[nn.Module] = [AdaLINResBlock(cfg.feature_channels) for _ in range(cfg.n_res)]
    for i in range(cfg.n_down):
        cin = cfg.feature_channels // 2**i
        blocks.append(Styled(UpBlock(cin, cin // 2)))
    blocks += [Styled(HourGlass(cfg.ngf)) for _ in range(cfg.n_hourglass)]
    blocks.append(Styled(nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(cfg.ngf, 3, 7, bias=False), nn.Tanh())))
    return blocks


def _run_decoder(blocks: nn.ModuleList, x, gamma, beta):
    for block in blocks:
        x = block(x, gamma, beta)
    return x


class SharedCore(nn.Module):
    """The group-shared middle: deep encoder blocks, CAM, style MLP, shallow decoder blocks."""

    def __init__(self, cfg: ModelConfig, n_enc_specific: int, n_dec_specific: int) -> None:
        super().__init__()
        enc = encoder_blocks(cfg)
        dec = decoder_blocks(cfg)
        self.enc = nn.ModuleList(enc[n_enc_specific:])
        self.cam = CAMAttention(cfg.feature_channels)
        self.style = StyleMLP(cfg.feature_channels, cfg.feature_size, cfg.light)
        self.dec = nn.ModuleList(dec[: len(dec) - n_dec_specific])

    def forward(self, f: torch.Tensor):
        for block in self.enc:
            f = block(f)
        f, cam_logit, heatmap = self.cam(f)
        gamma, beta = self.style(f)
        return _run_decoder(self.dec, f, gamma, beta), cam_logit, heatmap, gamma, beta


@dataclass
class SharedOutput:
    features: torch.Tensor
    cam_logit: torch.Tensor
    attention: torch.Tensor
    gamma: torch.Tensor
    beta: torch.Tensor


class DetachPolicy:
    """Decides whether a group's forward pass sees the shared stack as a detached clone."""

    def __init__(self, selective: bool = True) -> None:
        self.selective = selective

    def detach(self, group: int) -> bool:
        return self.selective and group != 0

    def __repr__(self) -> str:
        return f"DetachPolicy(selective={self.selective})"


class BranchedGenerator(nn.Module):
    """One translation direction: per-branch specific stacks around a shared core.

    ``branch_for`` maps registered group ids to branch keys. Normally every group has
    its own branch; the pooled ablations route several groups through branch 0.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        split: SplitConfig | None = None,
        direction: Direction = Direction.REAL2CARTOON,
        branch_for: dict[int, int] | None = None,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.split = split or SplitConfig()
        self.direction = Direction(direction)
        self.n_enc_specific, self.n_dec_specific = self.split.resolve(cfg)
        self.branch_for: dict[int, int] = dict(branch_for or {0: 0})
        self.detach_policy = DetachPolicy()
        self.shared = SharedCore(cfg, self.n_enc_specific, self.n_dec_specific)
        self.enc_specific = nn.ModuleDict()
        self.dec_specific = nn.ModuleDict()
        for b in sorted(set(self.branch_for.values())):
            self._new_branch(b)

    def _new_branch(self, branch: int) -> None:
        enc = encoder_blocks(self.cfg)[: self.n_enc_specific]
        dec = decoder_blocks(self.cfg)
        self.enc_specific[str(branch)] = nn.ModuleList(enc)
        self.dec_specific[str(branch)] = nn.ModuleList(dec[len(dec) - self.n_dec_specific :])

    @property
    def groups(self) -> list[int]:
        return sorted(self.branch_for)

    @property
    def branches(self) -> list[int]:
        return sorted(int(k) for k in self.enc_specific.keys())

    def add_branch(self, group: int, copy_from: int = 0) -> None:
        """Register ``group`` with its own branch, initialized as a value copy of another."""
        if group in self.branch_for:
            raise RegistryError(f"group {group} already registered")
        src = str(self.branch_for[copy_from]) if copy_from in self.branch_for else None
        if src is None:
            raise RegistryError(f"cannot copy from unregistered group {copy_from}")
        key = str(group)
        if key in self.enc_specific:
            raise RegistryError(f"branch {group} already exists")
        self.enc_specific[key] = copy.deepcopy(self.enc_specific[src])
        self.dec_specific[key] = copy.deepcopy(self.dec_specific[src])
        self.branch_for[group] = group

    def route(self, group: int, branch: int = 0) -> None:
        """Register ``group`` as an alias of an existing branch (pooled training)."""
        if group in self.branch_for:
            raise RegistryError(f"group {group} already registered")
        if str(branch) not in self.enc_specific:
            raise RegistryError(f"no branch {branch}")
        self.branch_for[group] = branch

    def _branch(self, group: int) -> str:
        try:
            return str(self.branch_for[int(group)])
        except KeyError:
            raise RegistryError(f"unknown group {group}; registered: {self.groups}") from None

    def encode_specific(self, x: torch.Tensor, group: int) -> torch.Tensor:
        key = self._branch(group)
        size = self.cfg.img_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(f"expected input of shape (N, 3, {size}, {size}), got {tuple(x.shape)}")
        for block in self.enc_specific[key]:
            x = block(x)
        return x

    def shared_forward(self, f: torch.Tensor, detach: bool = False) -> SharedOutput:
        expected = self._shared_input_shape()
        if tuple(f.shape[1:]) != expected:
            raise ShapeError(f"shared stack expects features {expected}, got {tuple(f.shape[1:])}")
        if detach:
            frozen = {name: p.detach() for name, p in self.shared.named_parameters()}
            out = functional_call(self.shared, frozen, (f,))
        else:
            out = self.shared(f)
        return SharedOutput(*out)

    def decode_specific(
        self,
        f: torch.Tensor,
        group: int,
        gamma: torch.Tensor | None = None,
        beta: torch.Tensor | None = None,
    ) -> torch.Tensor:
        key = self._branch(group)
        blocks = self.dec_specific[key]
        expected = self._decoder_input_shape()
        if tuple(f.shape[1:]) != expected:
            raise ShapeError(f"specific decoder expects features {expected}, got {tuple(f.shape[1:])}")
        if gamma is None and any(isinstance(b, AdaLINResBlock) for b in blocks):
            raise ContractError("specific decoder contains AdaLIN blocks; gamma/beta required")
        return _run_decoder(blocks, f, gamma, beta)

    def translate(self, x: torch.Tensor, group: int):
        """Full composition for ``group``. Returns (image, cam_logit, attention).

        In training mode the shared core is detached for groups the policy selects.
        """
        f = self.encode_specific(x, group)
        detach = self.training and self.detach_policy.detach(group)
        s = self.shared_forward(f, detach=detach)
        y = self.decode_specific(s.features, group, s.gamma, s.beta)
        return y, s.cam_logit, s.attention

    forward = translate

    def _shared_input_shape(self) -> tuple[int, int, int]:
        return _block_output_shape(self.cfg, self.n_enc_specific)

    def _decoder_input_shape(self) -> tuple[int, int, int]:
        cfg = self.cfg
        # decoder block j (from the shared side) consumes this shape
        j = cfg.n_dec_blocks - self.n_dec_specific
        return _decoder_block_input_shape(cfg, j)


def _block_output_shape(cfg: ModelConfig, n_blocks: int) -> tuple[int, int, int]:
    """Shape after the first ``n_blocks`` encoder blocks (0 means the raw image)."""
    if n_blocks == 0:
        return (3, cfg.img_size, cfg.img_size)
    downs = min(max(n_blocks - 1 - cfg.n_hourglass, 0), cfg.n_down)
    return (cfg.ngf * 2**downs, cfg.img_size // 2**downs, cfg.img_size // 2**downs)


def _decoder_block_input_shape(cfg: ModelConfig, j: int) -> tuple[int, int, int]:
    if j == cfg.n_dec_blocks:
        return (3, cfg.img_size, cfg.img_size)
    ups = min(max(j - cfg.n_res, 0), cfg.n_down)
    c = cfg.feature_channels // 2**ups
    s = cfg.feature_size * 2**ups
    return (c, s, s)


class Discriminator(nn.Module):
    """Patch critic with a CAM auxiliary head and a group-classification head."""

    def __init__(self, cfg: ModelConfig, n_groups: int = 1) -> None:
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = [nn.ReflectionPad2d(1), nn.Conv2d(3, cfg.ndf, 4, stride=2), nn.LeakyReLU(0.2)]
        c = cfg.ndf
        for _ in range(1, cfg.disc_layers):
            cout = min(c * 2, cfg.ndf * 8)
            layers += [nn.ReflectionPad2d(1), nn.Conv2d(c, cout, 4, stride=2), nn.LeakyReLU(0.2)]
            c = cout
        self.trunk = nn.Sequential(*layers)
        self.channels = c
        self.cam = CAMAttention(c, act=lambda t: F.leaky_relu(t, 0.2))
        self.adv_head = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(c, 1, 4, bias=False))
        self.cls_head = nn.Linear(c, n_groups)

    @property
    def n_groups(self) -> int:
        return self.cls_head.out_features

    def reset_cls_head(self, n_groups: int, std: float = 0.02, generator: torch.Generator | None = None) -> None:
        p = next(self.parameters())
        head = nn.Linear(self.channels, n_groups).to(dtype=p.dtype, device=p.device)
        with torch.no_grad():
            head.weight.normal_(0.0, std, generator=generator)
            head.bias.zero_()
        self.cls_head = head

    def forward(self, x: torch.Tensor):
        """Returns (patch_logits, cam_logit, group_logits, heatmap)."""
        size = self.cfg.img_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise ShapeError(f"expected input of shape (N, 3, {size}, {size}), got {tuple(x.shape)}")
        h = self.trunk(x)
        pooled = F.adaptive_avg_pool2d(h, 1).flatten(1)
        # RMS-normalized so the head's step size does not depend on trunk activation scale
        pooled = pooled * torch.rsqrt(pooled.pow(2).mean(dim=1, keepdim=True) + 1e-12)
        group_logits = self.cls_head(pooled)
        h, cam_logit, heatmap = self.cam(h)
        return self.adv_head(h), cam_logit, group_logits, heatmap

    discriminate = forward


def patch_size(img_size: int, n_layers: int) -> int:
    """Spatial size of the critic's patch map, from conv arithmetic."""
    s = img_size
    for _ in range(n_layers):
        s = (s + 2 - 4) // 2 + 1
    return s + 2 - 4 + 1


class CartoonGAN(nn.Module):
    """Both translation directions and both per-domain critics."""

    def __init__(
        self,
        cfg: ModelConfig,
        split: SplitConfig | None = None,
        branch_for: dict[int, int] | None = None,
        n_groups: int = 1,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.split = split or SplitConfig()
        self.gen = nn.ModuleDict(
            {d.value: BranchedGenerator(cfg, self.split, d, branch_for) for d in Direction}
        )
        self.disc = nn.ModuleDict({d.value: Discriminator(cfg, n_groups) for d in Domain})

    def generator(self, direction: Direction | str) -> BranchedGenerator:
        return self.gen[Direction(direction).value]

    def discriminator(self, domain: Domain | str) -> Discriminator:
        return self.disc[Domain(domain).value]

    @property
    def groups(self) -> list[int]:
        return self.generator(Direction.REAL2CARTOON).groups

    @property
    def branch_for(self) -> dict[int, int]:
        return dict(self.generator(Direction.REAL2CARTOON).branch_for)

    def set_detach_policy(self, policy: DetachPolicy) -> None:
        for g in self.gen.values():
            g.detach_policy = policy

    def translate(self, x: torch.Tensor, group: int, direction: Direction | str = Direction.REAL2CARTOON):
        return self.generator(direction).translate(x, group)

    def discriminate(self, x: torch.Tensor, domain: Domain | str):
        return self.discriminator(domain)(x)

    def generator_parameters(self):
        return [p for g in self.gen.values() for p in g.parameters()]

    def discriminator_parameters(self):
        return [p for d in self.disc.values() for p in d.parameters()]

    @torch.no_grad()
    def clamp_rho(self) -> None:
        for name, p in self.named_parameters():
            if name.endswith(".rho"):
                p.clamp_(0.0, 1.0)
