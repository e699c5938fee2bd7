"""Dataset layout, unpaired per-group sampling, augmentation and a synthetic corpus.

Expected layout (images are assumed to be aligned, pre-cropped faces)::

    <root>/group<k>/real/*.png|jpg
    <root>/group<k>/cartoon/*.png|jpg      k = 0..G-1
"""

from __future__ import annotations

import colorsys
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import AugmentConfig, ContractError, Domain, RegistryError, ToonError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
_GROUP_DIR = re.compile(r"^group(\d+)$")


class DatasetError(ToonError):
    """Malformed dataset directory. ``path`` names the offending location."""

    def __init__(self, message: str, path: Path | str | None = None) -> None:
        super().__init__(message)
        self.path = str(path) if path is not None else None


@dataclass
class GroupData:
    group: int
    real: list[Path]
    cartoon: list[Path]

    def paths(self, domain: Domain) -> list[Path]:
        return self.real if Domain(domain) is Domain.REAL else self.cartoon


@dataclass
class DatasetManifest:
    root: Path
    groups: list[GroupData]
    _cache: dict[Path, Image.Image] = field(default_factory=dict, repr=False, compare=False)

    @property
    def group_ids(self) -> list[int]:
        return [g.group for g in self.groups]

    def group(self, gid: int) -> GroupData:
        for g in self.groups:
            if g.group == gid:
                return g
        raise RegistryError(f"group {gid} not in dataset {self.root}")

    def image(self, path: Path) -> Image.Image:
        if path not in self._cache:
            self._cache[path] = _decode(path)
        return self._cache[path]


def _decode(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB")
    except Exception as e:  # PIL raises a zoo of types
        raise DatasetError(f"unreadable image {path}: {e}", path) from e


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_manifest(root: str | Path, validate: bool = True) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory", root)
    found: dict[int, Path] = {}
    for d in sorted(root.iterdir()):
        m = _GROUP_DIR.match(d.name)
        if d.is_dir() and m:
            found[int(m.group(1))] = d
    if not found:
        raise DatasetError(f"no group<k> directories under {root}", root)
    if sorted(found) != list(range(len(found))):
        raise DatasetError(f"group ids must be dense from 0, found {sorted(found)}", root)
    groups = []
    for gid in sorted(found):
        lists = {}
        for domain in Domain:
            d = found[gid] / domain.value
            if not d.is_dir():
                raise DatasetError(f"missing domain directory {d}", d)
            files = _list_images(d)
            if not files:
                raise DatasetError(f"empty domain directory {d}", d)
            lists[domain] = files
        groups.append(GroupData(gid, lists[Domain.REAL], lists[Domain.CARTOON]))
    manifest = DatasetManifest(root, groups)
    if validate:
        for g in groups:
            for p in g.real + g.cartoon:
                manifest.image(p)
    logger.info("loaded %d groups from %s", len(groups), root)
    return manifest


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def augment(
    image: Image.Image | np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    flip: bool | None = None,
) -> np.ndarray:
    """Resize, random-crop, maybe flip, and scale to [-1, 1]. Returns crop x crop x 3 float32.

    The rng is consumed identically whether or not ``flip`` is forced.
    """
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ContractError(f"expected an RGB array H x W x 3, got shape {image.shape}")
        image = Image.fromarray(image.astype(np.uint8), "RGB")
    if image.mode != "RGB":
        raise ContractError(f"expected an RGB image, got mode {image.mode}")
    resized = np.asarray(image.resize((config.resize, config.resize), Image.BILINEAR))
    top = int(rng.integers(0, config.resize - config.crop + 1))
    left = int(rng.integers(0, config.resize - config.crop + 1))
    coin = rng.random() < config.horizontal_flip_prob
    out = resized[top : top + config.crop, left : left + config.crop]
    if coin if flip is None else flip:
        out = hflip(out)
    return (out.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 array to a 1 x 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).unsqueeze(0).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W (or 3 x H x W) tensor in [-1, 1] to uint8 H x W x 3."""
    if t.dim() == 4:
        t = t[0]
    a = ((t.detach().float().clamp(-1, 1).cpu().numpy().transpose(1, 2, 0) + 1.0) * 127.5).round()
    return a.astype(np.uint8)


@dataclass
class TrainBatch:
    """One unpaired (real, cartoon) pair per active group."""

    real: dict[int, torch.Tensor]
    cartoon: dict[int, torch.Tensor]
    indices: dict[int, tuple[int, int]]

    @property
    def groups(self) -> list[int]:
        return sorted(self.real)


def sample_batch(
    manifest: DatasetManifest,
    rng: np.random.Generator,
    active_groups: list[int] | None = None,
    config: AugmentConfig | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainBatch:
    config = config or AugmentConfig()
    active = sorted(manifest.group_ids if active_groups is None else active_groups)
    batch = TrainBatch({}, {}, {})
    for gid in active:
        g = manifest.group(gid)
        ri = int(rng.integers(len(g.real)))
        ci = int(rng.integers(len(g.cartoon)))
        batch.real[gid] = to_tensor(augment(manifest.image(g.real[ri]), config, rng), dtype)
        batch.cartoon[gid] = to_tensor(augment(manifest.image(g.cartoon[ci]), config, rng), dtype)
        batch.indices[gid] = (ri, ci)
    return batch


@dataclass(frozen=True)
class SyntheticSpec:
    groups: int = 4
    per_group: int = 4
    size: int = 32
    seed: int = 0


def group_hue(group: int, n_groups: int) -> float:
    return (group + 0.5) / n_groups


def _face(size: int, hue: float, rng: np.random.Generator, textured: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    # background carries the group's hue band
    h = (hue + rng.uniform(-0.04, 0.04)) % 1.0
    bg = np.array(colorsys.hsv_to_rgb(h, 0.75, 0.85))
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    if textured:
        img *= (0.85 + 0.15 * yy)[..., None]
    cx, cy = 0.5 + rng.uniform(-0.05, 0.05), 0.52 + rng.uniform(-0.05, 0.05)
    rx, ry = rng.uniform(0.24, 0.3), rng.uniform(0.3, 0.36)
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    skin = np.array(colorsys.hsv_to_rgb(0.07, rng.uniform(0.3, 0.45), rng.uniform(0.8, 0.95)))
    if textured:
        shade = 0.8 + 0.2 * np.cos(3.0 * (xx - cx)) * np.cos(2.0 * (yy - cy))
        noise = rng.normal(0.0, 0.05, (size, size, 1))
        img[inside] = (skin * shade[..., None] + noise)[inside]
    else:
        img[inside] = skin
        edge = np.abs(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 - 1.0) < 2.5 / size
        img[edge] = 0.1
    for ex in (cx - rx * 0.4, cx + rx * 0.4):
        eye = ((xx - ex) / (rx * 0.18)) ** 2 + ((yy - (cy - ry * 0.15)) / (ry * 0.12)) ** 2 <= 1.0
        img[eye] = 0.1
    mouth = (np.abs(yy - (cy + ry * 0.45)) < 1.5 / size) & (np.abs(xx - cx) < rx * 0.35)
    img[mouth] = (0.6, 0.15, 0.15)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic(root: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> DatasetManifest:
    """Write a small procedurally generated two-domain corpus with a per-group hue band.

    Real-domain faces are shaded and noisy; cartoon-domain faces are flat with an outline.
    """
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    for g in range(spec.groups):
        hue = group_hue(g, spec.groups)
        for domain in Domain:
            d = root / f"group{g}" / domain.value
            d.mkdir(parents=True, exist_ok=True)
            for i in range(spec.per_group):
                img = _face(spec.size, hue, rng, textured=domain is Domain.REAL)
                Image.fromarray(img, "RGB").save(d / f"{i:04d}.png", optimize=False)
    return load_manifest(root)
