"""Two-stage training: a basic translator on group 0, then grafted few-shot branches."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from .branches import ParamPartition, graft, partition
from .config import (
    ContractError,
    Direction,
    Domain,
    LossWeights,
    ModelConfig,
    RegistryError,
    RunMeta,
    SplitConfig,
    TrainConfig,
)
from .data import DatasetManifest, TrainBatch, load_manifest, sample_batch, to_tensor
from .losses import (
    FaceEmbedder,
    LossBundle,
    adv_loss_d,
    adv_loss_g,
    cam_loss_d,
    cam_loss_g,
    cycle_loss,
    face_id_loss,
    group_cls_loss,
    identity_loss,
    total_d,
    total_g,
)
from .model import LIN, AdaLIN, CartoonGAN, DetachPolicy

logger = logging.getLogger(__name__)

R2C, C2R = Direction.REAL2CARTOON, Direction.CARTOON2REAL


def init_params(model: CartoonGAN, config: TrainConfig, generator: torch.Generator | None = None) -> CartoonGAN:
    """Draw every conv/linear weight from N(0, init_std^2) with the seeded generator.

    Biases start at zero, AdaLIN ratios at 1, layer-instance norms at rho=0, gamma=1, beta=0.
    """
    if any(len(g.branches) > 1 for g in model.gen.values()):
        raise ContractError("refusing to re-initialize a grafted model")
    gen = generator or torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for _, m in model.named_modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * config.init_std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, AdaLIN):
                m.rho.fill_(1.0)
            elif isinstance(m, LIN):
                m.rho.fill_(0.0)
                m.gamma.fill_(1.0)
                m.beta.fill_(0.0)
    return model


@dataclass
class MetricTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, key: str) -> list[float]:
        return [r["losses"][key] for r in self.records]

    def deterministic_view(self) -> list[dict]:
        """Records without wall-clock fields; equal across identically seeded runs."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]


def _sigmoid(t: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(t)


def generator_losses(
    model: CartoonGAN,
    embedder: FaceEmbedder,
    real: torch.Tensor,
    cartoon: torch.Tensor,
    group: int,
) -> LossBundle:
    """Generator-side loss components for one (real, cartoon) pair of ``group``, both directions."""
    g_rc, g_cr = model.generator(R2C), model.generator(C2R)
    d_real, d_cartoon = model.discriminator(Domain.REAL), model.discriminator(Domain.CARTOON)

    fake_c, cam_rc_src, _ = g_rc.translate(real, group)
    fake_r, cam_cr_src, _ = g_cr.translate(cartoon, group)
    rec_r, _, _ = g_cr.translate(fake_c, group)
    rec_c, _, _ = g_rc.translate(fake_r, group)
    id_c, cam_rc_tgt, _ = g_rc.translate(cartoon, group)
    id_r, cam_cr_tgt, _ = g_cr.translate(real, group)

    patch_c, _, cls_c, _ = d_cartoon(fake_c)
    patch_r, _, cls_r, _ = d_real(fake_r)

    return LossBundle(
        adv_g=adv_loss_g(patch_c) + adv_loss_g(patch_r),
        cycle=cycle_loss(real, rec_r) + cycle_loss(cartoon, rec_c),
        identity=identity_loss(cartoon, id_c) + identity_loss(real, id_r),
        cam_g=cam_loss_g(_sigmoid(cam_rc_src), _sigmoid(cam_rc_tgt))
        + cam_loss_g(_sigmoid(cam_cr_src), _sigmoid(cam_cr_tgt)),
        face=face_id_loss(real, fake_c, cartoon, fake_r, embedder),
        cls_fake=group_cls_loss(cls_c, group) + group_cls_loss(cls_r, group),
    )


def discriminator_losses(model: CartoonGAN, real: torch.Tensor, cartoon: torch.Tensor, group: int) -> LossBundle:
    """Critic-side components; translations are computed without generator gradients."""
    with torch.no_grad():
        fake_c = model.generator(R2C).translate(real, group)[0]
        fake_r = model.generator(C2R).translate(cartoon, group)[0]
    d_real, d_cartoon = model.discriminator(Domain.REAL), model.discriminator(Domain.CARTOON)
    rp, rcam, rcls, _ = d_cartoon(cartoon)
    fp, fcam, _, _ = d_cartoon(fake_c)
    rp2, rcam2, rcls2, _ = d_real(real)
    fp2, fcam2, _, _ = d_real(fake_r)
    return LossBundle(
        adv_d=adv_loss_d(rp, fp) + adv_loss_d(rp2, fp2),
        cam_d=cam_loss_d(rcam, fcam) + cam_loss_d(rcam2, fcam2),
        cls_real=group_cls_loss(rcls, group) + group_cls_loss(rcls2, group),
    )


def _drop_zero_grads(params: Iterable[torch.nn.Parameter]) -> None:
    # Adam skips grad=None parameters entirely: no decay, no moment update
    for p in params:
        if p.grad is not None and not bool(p.grad.any()):
            p.grad = None


def _grad_snapshot(params: list[torch.nn.Parameter]) -> list[torch.Tensor | None]:
    return [None if p.grad is None else p.grad.detach().clone() for p in params]


def _delta_norm(params: list[torch.nn.Parameter], before: list[torch.Tensor | None]) -> float:
    total = 0.0
    for p, b in zip(params, before):
        if p.grad is None:
            continue
        d = p.grad if b is None else p.grad - b
        total += float(d.detach().double().pow(2).sum())
    return total**0.5


def _norm(params: list[torch.nn.Parameter]) -> float:
    return sum(float(p.grad.detach().double().pow(2).sum()) for p in params if p.grad is not None) ** 0.5


class Trainer:
    """Holds the models, the frozen embedder, optimizers and the metric trace for one stage."""

    def __init__(
        self,
        model: CartoonGAN,
        config: TrainConfig,
        weights: LossWeights | None = None,
        active_groups: list[int] | None = None,
        policy: DetachPolicy | None = None,
        metrics_path: str | Path | None = None,
    ) -> None:
        self.model = model
        self.config = config
        self.weights = weights or LossWeights()
        self.active_groups = sorted(active_groups if active_groups is not None else model.groups)
        for g in self.active_groups:
            if g not in model.groups:
                raise RegistryError(f"active group {g} is not registered in the model")
        self.policy = policy or DetachPolicy()
        model.set_detach_policy(self.policy)
        dtype = next(model.parameters()).dtype
        self.dtype = dtype
        self.embedder = FaceEmbedder(model.cfg.embed_dim, seed=config.embedder_seed).to(dtype)
        self.partition: ParamPartition = partition(model)
        named = dict(model.named_parameters())
        self.shared_params = [named[n] for n in self.partition.shared]
        self.specific_params = {b: [named[n] for n in ns] for b, ns in self.partition.specific.items()}
        groups = [{"params": self.shared_params, "name": "shared"}]
        groups += [{"params": ps, "name": f"specific{b}"} for b, ps in self.specific_params.items()]
        adam = dict(lr=config.lr, betas=(config.adam_beta1, config.adam_beta2), weight_decay=config.weight_decay)
        self.opt_g = torch.optim.Adam(groups, **adam)
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), **adam)
        self.trace = MetricTrace()
        self.step_count = 0
        self.metrics_path = Path(metrics_path) if metrics_path else None

    def train_step(self, batch: TrainBatch) -> dict:
        model = self.model
        model.train()
        t0 = time.perf_counter()
        groups = [g for g in batch.groups if g in self.active_groups]
        if not groups:
            raise ContractError("batch holds no active group")

        # critic update over every group's samples
        self.opt_d.zero_grad(set_to_none=True)
        d_bundle = LossBundle()
        for g in groups:
            d_bundle = d_bundle + discriminator_losses(model, batch.real[g], batch.cartoon[g], g)
        d_bundle.check_finite()
        total_d(d_bundle).backward()
        self.opt_d.step()

        # generator update; backward one group at a time to attribute shared gradients
        self.opt_g.zero_grad(set_to_none=True)
        g_bundle = LossBundle()
        shared_from: dict[str, float] = {}
        for g in groups:
            bundle = generator_losses(model, self.embedder, batch.real[g], batch.cartoon[g], g)
            bundle.check_finite()
            before = _grad_snapshot(self.shared_params)
            total_g(bundle, self.weights).backward()
            shared_from[str(g)] = _delta_norm(self.shared_params, before)
            g_bundle = g_bundle + LossBundle(**{k: v.detach() if torch.is_tensor(v) else v for k, v in vars(bundle).items()})
        for p in model.discriminator_parameters():
            p.grad = None
        grad_norms = {
            "shared": _norm(self.shared_params),
            "shared_from_group": shared_from,
            "shared_from_fewshot": sum(v**2 for k, v in shared_from.items() if k != "0") ** 0.5,
            "specific": {str(b): _norm(ps) for b, ps in self.specific_params.items()},
        }
        _drop_zero_grads(model.generator_parameters())
        self.opt_g.step()
        model.clamp_rho()

        self.step_count += 1
        losses = {**{k: v for k, v in g_bundle.floats().items() if k not in ("adv_d", "cam_d", "cls_real")}}
        losses.update({k: d_bundle.floats()[k] for k in ("adv_d", "cam_d", "cls_real")})
        record = {
            "step": self.step_count,
            "groups": groups,
            "losses": losses,
            "total_g": float(total_g(g_bundle, self.weights)),
            "total_d": float(total_d(d_bundle).detach()),
            "grad_norms": grad_norms,
            "wall_time": time.perf_counter() - t0,
        }
        self.trace.append(record)
        if self.metrics_path is not None:
            with self.metrics_path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def run(
        self,
        manifest: DatasetManifest,
        iterations: int,
        rng: np.random.Generator,
        checkpoint_cb=None,
    ) -> MetricTrace:
        aug = self.config.augment
        for i in range(iterations):
            batch = sample_batch(manifest, rng, self.active_groups, aug, dtype=self.dtype)
            rec = self.train_step(batch)
            if i % 50 == 0 or i == iterations - 1:
                logger.info("step %d total_g=%.4f total_d=%.4f", rec["step"], rec["total_g"], rec["total_d"])
            if checkpoint_cb and self.config.checkpoint_every and rec["step"] % self.config.checkpoint_every == 0:
                checkpoint_cb(rec["step"])
        return self.trace


def _as_manifest(data: DatasetManifest | str | Path) -> DatasetManifest:
    return data if isinstance(data, DatasetManifest) else load_manifest(data)


def _prepare_out(out_dir: str | Path | None, force: bool) -> Path | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("metrics.jsonl", "checkpoint.ckpt"):
        p = out / name
        if p.exists():
            if not force:
                raise FileExistsError(f"{p} exists; pass force to overwrite")
            p.unlink()
    return out


def build_basic(model_cfg: ModelConfig, config: TrainConfig, split: SplitConfig | None = None) -> CartoonGAN:
    model = CartoonGAN(model_cfg, split)
    return init_params(model, config)


@dataclass
class TrainResult:
    checkpoint: ckpt_io.Checkpoint
    trace: MetricTrace
    path: Path | None = None


def train_basic(
    data: DatasetManifest | str | Path,
    config: TrainConfig,
    model_cfg: ModelConfig,
    split: SplitConfig | None = None,
    weights: LossWeights | None = None,
    out_dir: str | Path | None = None,
    force: bool = False,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Stage 1: a single-branch translator trained on group 0 only."""
    manifest = _as_manifest(data)
    if 0 not in manifest.group_ids:
        raise ContractError("basic training needs group 0 in both domains")
    if model_cfg.img_size != config.crop:
        raise ContractError(f"model img_size {model_cfg.img_size} != crop {config.crop}")
    torch.manual_seed(config.seed)
    out = _prepare_out(out_dir, force)
    model = build_basic(model_cfg, config, split).to(dtype)
    weights = weights or LossWeights()
    trainer = Trainer(model, config, weights, [0], metrics_path=out / "metrics.jsonl" if out else None)
    meta = RunMeta(model_cfg, model.split, weights, stage="basic", seed=config.seed)
    rng = np.random.default_rng(config.seed)
    trainer.run(manifest, config.iterations, rng, _checkpointer(out, trainer, meta))
    return _finish(trainer, meta, out)


def _checkpointer(out: Path | None, trainer: Trainer, meta: RunMeta):
    if out is None:
        return None

    def cb(step: int) -> None:
        ckpt_io.save(out / f"step{step:06d}.ckpt", trainer.model, replace(meta, step=step))

    return cb


def _finish(trainer: Trainer, meta: RunMeta, out: Path | None) -> TrainResult:
    meta = replace(meta, step=trainer.step_count)
    trainer.model.eval()
    path = ckpt_io.save(out / "checkpoint.ckpt", trainer.model, meta) if out else None
    return TrainResult(ckpt_io.Checkpoint(trainer.model, meta), trainer.trace, path)


def prepare_fewshot(
    basic: ckpt_io.Checkpoint | CartoonGAN,
    group_ids: list[int],
    mode: str = "default",
    split: SplitConfig | None = None,
    seed: int = 0,
    init_std: float = 0.02,
) -> tuple[CartoonGAN, list[int], DetachPolicy]:
    """Build the stage-2 model for an ablation mode; returns (model, active groups, policy)."""
    base = getattr(basic, "model", basic)
    new = [g for g in sorted(group_ids) if g != 0]
    if mode in ("default", "no_selective"):
        model = graft(base, new, split)
        active = sorted(group_ids)
        policy = DetachPolicy(selective=mode == "default")
    elif mode in ("mixed", "finetune_all"):
        model = graft(base, [], split)
        for g in new:
            for gen in model.gen.values():
                gen.route(g, 0)
        active = sorted(group_ids) if mode == "mixed" else new
        policy = DetachPolicy(selective=False)
    else:
        raise ContractError(f"unknown ablation mode {mode!r}")
    if not active:
        raise ContractError(f"mode {mode} has no groups to train on")
    # critics are reused; only the group head is resized to the full group count
    head_gen = torch.Generator().manual_seed(seed + 1)
    n_groups = max(group_ids) + 1
    for d in model.disc.values():
        d.reset_cls_head(n_groups, init_std, head_gen)
    model.set_detach_policy(policy)
    return model, active, policy


def train_fewshot(
    data: DatasetManifest | str | Path,
    basic: ckpt_io.Checkpoint | str | Path,
    config: TrainConfig,
    weights: LossWeights | None = None,
    split: SplitConfig | None = None,
    out_dir: str | Path | None = None,
    force: bool = False,
    groups: list[int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Stage 2: graft per-group branches onto the basic model and train on one sample per group."""
    manifest = _as_manifest(data)
    if not isinstance(basic, ckpt_io.Checkpoint):
        basic = ckpt_io.load(basic)
    group_ids = sorted(groups if groups is not None else manifest.group_ids)
    missing = sorted(set(group_ids) - set(manifest.group_ids))
    if missing:
        raise RegistryError(f"groups {missing} configured but absent from the dataset")
    if 0 not in group_ids:
        raise ContractError("few-shot training needs group 0")
    if basic.meta.model.img_size != config.crop:
        raise ContractError(f"checkpoint img_size {basic.meta.model.img_size} != crop {config.crop}")
    torch.manual_seed(config.seed)
    out = _prepare_out(out_dir, force)
    model, active, policy = prepare_fewshot(
        basic, group_ids, config.ablation_mode, split, config.seed, config.init_std
    )
    model = model.to(dtype)
    weights = weights or basic.meta.weights
    trainer = Trainer(model, config, weights, active, policy, out / "metrics.jsonl" if out else None)
    meta = RunMeta(
        basic.meta.model,
        model.split,
        weights,
        stage="fewshot",
        seed=config.seed,
        extra={"ablation_mode": config.ablation_mode},
    )
    rng = np.random.default_rng(config.seed)
    trainer.run(manifest, config.iterations, rng, _checkpointer(out, trainer, meta))
    return _finish(trainer, meta, out)


def _center(img, size: int, resize: int) -> np.ndarray:
    from PIL import Image

    r = np.asarray(img.resize((resize, resize), Image.BILINEAR))
    o = (resize - size) // 2
    return (r[o : o + size, o : o + size].astype(np.float32) / 127.5 - 1.0).astype(np.float32)


@torch.no_grad()
def group_accuracy(model: CartoonGAN, manifest: DatasetManifest, config: TrainConfig) -> float:
    """Fraction of real dataset images (both domains) whose group the critics' heads recover."""
    dtype = next(model.parameters()).dtype
    hits = total = 0
    for g in manifest.groups:
        for domain in Domain:
            d = model.discriminator(domain)
            for p in g.paths(domain):
                x = to_tensor(_center(manifest.image(p), config.crop, config.resize), dtype)
                logits = d(x)[2]
                hits += int(int(logits.argmax(dim=1)) == g.group)
                total += 1
    return hits / max(total, 1)
