"""Shared/specific parameter partition, grafting of group branches, gradient routing."""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Iterable

import torch

from .config import ContractError, Direction, RegistryError, SplitConfig
from .model import BranchedGenerator, CartoonGAN, DetachPolicy

__all__ = [
    "DetachPolicy",
    "GradientReport",
    "ParamPartition",
    "graft",
    "partition",
    "resplit",
    "routed_loss_backward",
]

_SPECIFIC = re.compile(r"^gen\.(\w+)\.(enc|dec)_specific\.(\d+)\.")
_SHARED = re.compile(r"^gen\.(\w+)\.shared\.")


@dataclass
class ParamPartition:
    """Generator parameter names split into the shared cell and one cell per branch."""

    shared: list[str] = field(default_factory=list)
    specific: dict[int, list[str]] = field(default_factory=dict)

    def all_names(self) -> list[str]:
        names = list(self.shared)
        for b in sorted(self.specific):
            names += self.specific[b]
        return names

    def cell_of(self, name: str) -> str | int:
        if name in set(self.shared):
            return "shared"
        for b, names in self.specific.items():
            if name in set(names):
                return b
        raise KeyError(name)


def partition(model: CartoonGAN, split: SplitConfig | None = None) -> ParamPartition:
    """Partition every generator parameter of ``model`` (both directions).

    Ordering follows ``named_parameters`` so optimizer groups built from it are stable.
    """
    if split is not None and split.resolve(model.cfg) != split_of(model).resolve(model.cfg):
        raise ContractError(f"model was built under {split_of(model)}, not {split}")
    part = ParamPartition(specific={b: [] for b in model.generator(Direction.REAL2CARTOON).branches})
    for name, _ in model.named_parameters():
        if not name.startswith("gen."):
            continue
        m = _SPECIFIC.match(name)
        if m:
            part.specific.setdefault(int(m.group(3)), []).append(name)
        elif _SHARED.match(name):
            part.shared.append(name)
        else:
            raise ContractError(f"parameter {name} belongs to no partition cell")
    return part


def split_of(model: CartoonGAN) -> SplitConfig:
    g = model.generator(Direction.REAL2CARTOON)
    return SplitConfig(g.n_enc_specific, g.n_dec_specific)


def _canonical_state(gen: BranchedGenerator, branch: int) -> dict[str, torch.Tensor]:
    """Parameters of one branch path keyed by split-independent block indices."""
    cfg = gen.cfg
    out: dict[str, torch.Tensor] = {}
    ne, nd = gen.n_enc_specific, gen.n_dec_specific
    first_specific_dec = cfg.n_dec_blocks - nd
    for i, block in enumerate(gen.enc_specific[str(branch)]):
        for n, p in block.named_parameters():
            out[f"enc.{i}.{n}"] = p
    for i, block in enumerate(gen.shared.enc):
        for n, p in block.named_parameters():
            out[f"enc.{ne + i}.{n}"] = p
    for prefix in ("cam", "style"):
        for n, p in getattr(gen.shared, prefix).named_parameters():
            out[f"{prefix}.{n}"] = p
    for j, block in enumerate(gen.shared.dec):
        for n, p in block.named_parameters():
            out[f"dec.{j}.{n}"] = p
    for j, block in enumerate(gen.dec_specific[str(branch)]):
        for n, p in block.named_parameters():
            out[f"dec.{first_specific_dec + j}.{n}"] = p
    return out


def resplit(model: CartoonGAN, split: SplitConfig) -> CartoonGAN:
    """Rebuild a single-branch model under a different split, carrying every value over."""
    if model.generator(Direction.REAL2CARTOON).branches != [0]:
        raise ContractError("only single-branch (basic) models can be re-split")
    if split.resolve(model.cfg) == split_of(model).resolve(model.cfg):
        return copy.deepcopy(model)
    ref = next(model.parameters())
    new = CartoonGAN(model.cfg, split, model.branch_for, n_groups=model.discriminator("real").n_groups)
    new = new.to(dtype=ref.dtype, device=ref.device)
    with torch.no_grad():
        for d in Direction:
            src = _canonical_state(model.generator(d), 0)
            dst = _canonical_state(new.generator(d), 0)
            if src.keys() != dst.keys():
                raise ContractError("incompatible architectures under re-split")
            for k, p in dst.items():
                p.copy_(src[k])
        new.disc.load_state_dict(model.disc.state_dict())
    return new


def graft(
    basic: "CartoonGAN | object",
    new_groups: Iterable[int],
    split: SplitConfig | None = None,
) -> CartoonGAN:
    """Add one branch per new group, each a value copy of group 0's specific stacks.

    ``basic`` is a single-branch model or a loaded checkpoint carrying one in ``.model``.
    The input is not modified.
    """
    model = getattr(basic, "model", basic)
    if not isinstance(model, CartoonGAN):
        raise ContractError(f"cannot graft onto {type(model).__name__}")
    new_groups = [int(g) for g in new_groups]
    if len(set(new_groups)) != len(new_groups):
        raise RegistryError(f"duplicate group ids in {new_groups}")
    existing = set(model.groups)
    clash = sorted(existing & set(new_groups))
    if clash:
        raise RegistryError(f"groups {clash} already registered in the basic model")
    if 0 not in existing:
        raise ContractError("basic model has no group-0 branch")
    if split is not None:
        try:
            split.resolve(model.cfg)
        except ContractError as e:
            raise ContractError(f"incompatible split for checkpoint: {e}") from None
        out = resplit(model, split)
    else:
        out = copy.deepcopy(model)
    for g in new_groups:
        if g < 0:
            raise RegistryError(f"group ids must be nonnegative, got {g}")
        for gen in out.gen.values():
            gen.add_branch(g, copy_from=0)
    return out


@dataclass
class GradientReport:
    shared: float
    specific: dict[int, float]
    discriminator: float = 0.0

    @property
    def isolated(self) -> bool:
        return self.shared == 0.0

    def as_dict(self) -> dict:
        return {"shared": self.shared, "specific": {str(k): v for k, v in self.specific.items()}}


def _norm(params: list[torch.nn.Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return total**0.5


def gradient_report(model: CartoonGAN, part: ParamPartition | None = None) -> GradientReport:
    part = part or partition(model)
    params = dict(model.named_parameters())
    return GradientReport(
        shared=_norm([params[n] for n in part.shared]),
        specific={b: _norm([params[n] for n in names]) for b, names in part.specific.items()},
        discriminator=_norm(model.discriminator_parameters()),
    )


def routed_loss_backward(
    loss: torch.Tensor,
    group: int,
    policy: DetachPolicy,
    model: CartoonGAN,
) -> GradientReport:
    """Backpropagate ``loss`` from a ``group`` sample and report per-cell gradient norms.

    Existing gradients are cleared first so the report reflects this loss alone.
    """
    if group not in model.groups:
        raise RegistryError(f"unknown group {group}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise ContractError("loss is not connected to any trainable parameter")
    model.zero_grad(set_to_none=True)
    loss.backward()
    report = gradient_report(model)
    if policy.detach(group) and not report.isolated:
        raise ContractError(f"shared stack received gradient from group {group} under {policy}")
    return report
