"""Single-file checkpoint archive and CAM attention panel export.

Archive layout (all integers little-endian)::

    b"FSTOONCK"  u32 format_version  u64 header_len  header(JSON, utf-8)  u32 crc32(header)
    blob*        each: u32 ndim, ndim * u32 dims, u64 nbytes, nbytes of float32 data
    u64 blob_section_len  b"ENDTOON!"

The header holds the run manifest and an index of (name, shape, offset, nbytes, crc32).
Loading validates everything before building a model, so a bad file never yields a
partially populated one.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import Direction, RunMeta, ToonError
from .data import to_image
from .model import CartoonGAN

MAGIC = b"FSTOONCK"
END_MAGIC = b"ENDTOON!"
FORMAT_VERSION = 1


class CheckpointError(ToonError):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: CartoonGAN
    meta: RunMeta

    @property
    def group_ids(self) -> list[int]:
        return self.model.groups


def _encode_blob(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    data = arr.tobytes()
    return head + struct.pack("<Q", len(data)) + data


def serialize(model: CartoonGAN, meta: RunMeta) -> bytes:
    meta = dataclasses.replace(meta, group_ids=model.groups, branch_for=model.branch_for)
    blobs = io.BytesIO()
    index = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        blob = _encode_blob(arr)
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": blobs.tell(),
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.write(blob)
    header = {
        "meta": meta.to_json(),
        "disc_groups": model.discriminator("real").n_groups,
        "index": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = blobs.getvalue()
    return b"".join(
        [
            MAGIC,
            struct.pack("<IQ", FORMAT_VERSION, len(hbytes)),
            hbytes,
            struct.pack("<I", zlib.crc32(hbytes)),
            body,
            struct.pack("<Q", len(body)),
            END_MAGIC,
        ]
    )


def save(path: str | Path, model: CartoonGAN, meta: RunMeta, force: bool = True) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise CheckpointError(f"{path} exists; refusing to overwrite")
    data = serialize(model, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def _parse(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint archive (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    pos = len(MAGIC) + 12
    if pos + hlen + 4 > len(data):
        raise IntegrityError("truncated header")
    hbytes = data[pos : pos + hlen]
    (hcrc,) = struct.unpack_from("<I", data, pos + hlen)
    if zlib.crc32(hbytes) != hcrc:
        raise IntegrityError("header checksum mismatch")
    header = json.loads(hbytes)
    body_start = pos + hlen + 4
    if len(data) < body_start + 16 or data[-8:] != END_MAGIC:
        raise IntegrityError("truncated archive (missing end marker)")
    (body_len,) = struct.unpack_from("<Q", data, len(data) - 16)
    if body_start + body_len != len(data) - 16:
        raise IntegrityError("blob section length mismatch")
    body = data[body_start : body_start + body_len]

    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header["index"]:
        name, off, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        if off != expected_offset or off + nbytes > len(body):
            raise IntegrityError(f"blob {name} lies outside the blob section")
        blob = body[off : off + nbytes]
        if zlib.crc32(blob) != entry["crc32"]:
            raise IntegrityError(f"blob {name} checksum mismatch")
        (ndim,) = struct.unpack_from("<I", blob, 0)
        if 4 + 4 * ndim + 8 > nbytes:
            raise IntegrityError(f"blob {name} has a malformed shape prefix")
        shape = struct.unpack_from(f"<{ndim}I", blob, 4)
        (dlen,) = struct.unpack_from("<Q", blob, 4 + 4 * ndim)
        start = 4 + 4 * ndim + 8
        if list(shape) != entry["shape"] or dlen != 4 * int(np.prod(shape, dtype=np.int64)) or start + dlen != nbytes:
            raise IntegrityError(f"blob {name} length/shape header inconsistent")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=dlen // 4, offset=start).reshape(shape).copy()
        expected_offset = off + nbytes
    if expected_offset != len(body):
        raise IntegrityError("orphan bytes after the last indexed blob")
    return header, arrays


def loads(data: bytes) -> Checkpoint:
    header, arrays = _parse(data)
    meta = RunMeta.from_json(header["meta"])
    model = CartoonGAN(meta.model, meta.split, meta.branch_for, n_groups=int(header["disc_groups"]))
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    orphans = sorted(set(arrays) - set(state))
    if missing or orphans:
        raise CheckpointError(f"parameter set mismatch: missing {missing[:5]}, orphan {orphans[:5]}")
    for name, ref in state.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise CheckpointError(f"{name}: blob shape {arrays[name].shape} != architecture {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return Checkpoint(model, meta)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return loads(data)


# attention export


@dataclass
class AttentionExport:
    source: np.ndarray
    attention_fwd: np.ndarray
    translated: np.ndarray
    attention_back: np.ndarray
    reconstruction: np.ndarray
    path: Path | None = None

    def panel(self) -> np.ndarray:
        cols = [self.source, _gray(self.attention_fwd), self.translated, _gray(self.attention_back), self.reconstruction]
        return np.concatenate(cols, axis=1)


def _gray(h: np.ndarray) -> np.ndarray:
    return np.repeat(h[..., None], 3, axis=2)


def normalize_heatmap(att: np.ndarray) -> np.ndarray:
    """Min-max scale to integers in [0, 255]; a constant map becomes mid-gray 128."""
    att = np.asarray(att, dtype=np.float64)
    lo, hi = float(att.min()), float(att.max())
    if hi == lo:
        return np.full(att.shape, 128, dtype=np.uint8)
    return np.round((att - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _upsample(att: torch.Tensor, size: int) -> np.ndarray:
    up = F.interpolate(att.float(), size=(size, size), mode="bilinear", align_corners=False)
    return up[0, 0].cpu().numpy()


@torch.no_grad()
def export_attention(
    model: CartoonGAN,
    images: list[torch.Tensor],
    group: int,
    out_dir: str | Path | None = None,
    force: bool = True,
) -> list[AttentionExport]:
    """Translate each image to a cartoon and back, recording both attention maps.

    Panels (source | forward attention | cartoon | backward attention | reconstruction)
    are written as PNG to ``out_dir`` when given.
    """
    g_fwd = model.generator(Direction.REAL2CARTOON)
    g_back = model.generator(Direction.CARTOON2REAL)
    g_fwd._branch(group)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for i, x in enumerate(images):
            x = x.to(dtype)
            if x.dim() == 3:
                x = x.unsqueeze(0)
            size = x.shape[-1]
            fake, _, att_f = g_fwd.translate(x, group)
            rec, _, att_b = g_back.translate(fake, group)
            rec_ = AttentionExport(
                source=to_image(x),
                attention_fwd=normalize_heatmap(_upsample(att_f, size)),
                translated=to_image(fake),
                attention_back=normalize_heatmap(_upsample(att_b, size)),
                reconstruction=to_image(rec),
            )
            if out_dir is not None:
                d = Path(out_dir)
                d.mkdir(parents=True, exist_ok=True)
                p = d / f"attention_g{group}_{i:04d}.png"
                if p.exists() and not force:
                    raise CheckpointError(f"{p} exists; refusing to overwrite")
                Image.fromarray(rec_.panel(), "RGB").save(p)
                rec_.path = p
            out.append(rec_)
    finally:
        model.train(was_training)
    return out
