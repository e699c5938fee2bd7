"""Command-line entry points, one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from PIL import Image

from . import checkpoint as ckpt_io
from .branches import graft
from .config import (
    ABLATIONS,
    Direction,
    LossWeights,
    ModelConfig,
    SplitConfig,
    TrainConfig,
    from_dict,
    to_dict,
)
from .data import SyntheticSpec, generate_synthetic, to_image, to_tensor
from .trainer import train_basic, train_fewshot

logger = logging.getLogger("fewshot_toon")


class CLIError(Exception):
    pass


def _read_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise CLIError(f"config {path} must be a mapping")
    return data


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Merge the config file with flag overrides; flags win."""
    raw = _read_config(getattr(args, "config", None))
    train = dict(raw.get("train", {}))
    model = dict(raw.get("model", {}))
    split = dict(raw.get("split", {}))
    weights = dict(raw.get("weights", {}))
    overrides = {
        "seed": getattr(args, "seed", None),
        "iterations": getattr(args, "iters", None),
        "lr": getattr(args, "lr", None),
        "ablation_mode": getattr(args, "ablation", None),
    }
    train.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "size", None) is not None and "crop" not in train:
        train["crop"] = args.size
        train.setdefault("resize", args.size + args.size // 8)
    tc = from_dict(TrainConfig, train)
    model.setdefault("img_size", tc.crop)
    if "disc_layers" not in model:
        model["disc_layers"] = default_disc_layers(int(model["img_size"]))
    return {
        "train": tc,
        "model": from_dict(ModelConfig, model),
        "split": from_dict(SplitConfig, split),
        "weights": from_dict(LossWeights, weights),
    }


def default_disc_layers(size: int) -> int:
    """Deepest critic (at most 5 stride-2 layers) that keeps a patch map of at least 4."""
    layers = 5
    while layers > 1 and size // 2**layers < 4:
        layers -= 1
    return layers


def _echo_config(out: Path, resolved: dict[str, Any], extra: dict[str, Any]) -> None:
    doc = {k: to_dict(v) for k, v in resolved.items()}
    doc.update(extra)
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args: argparse.Namespace) -> Path:
    if not args.out:
        raise CLIError("--out is required")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_data(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    spec = SyntheticSpec(args.groups, args.per_group, args.size, args.seed or 0)
    manifest = generate_synthetic(out, spec)
    n = sum(len(g.real) + len(g.cartoon) for g in manifest.groups)
    print(json.dumps({"root": str(out), "groups": manifest.group_ids, "files": n}))
    return 0


def cmd_train_basic(args: argparse.Namespace) -> int:
    resolved = resolve_config(args)
    resolved["train"] = replace(resolved["train"], stage="basic")
    out = _out_dir(args)
    _echo_config(out, resolved, {"data": str(args.data), "command": "train-basic"})
    res = train_basic(
        args.data,
        resolved["train"],
        resolved["model"],
        resolved["split"],
        resolved["weights"],
        out_dir=out,
        force=True,
    )
    print(json.dumps({"checkpoint": str(res.path), "steps": len(res.trace)}))
    return 0


def cmd_graft(args: argparse.Namespace) -> int:
    basic = ckpt_io.load(args.ckpt)
    groups = _parse_groups(args.groups)
    split = from_dict(SplitConfig, _read_config(args.config).get("split")) if args.config else None
    model = graft(basic, [g for g in groups if g != 0], split)
    out = _out_dir(args)
    meta = replace(basic.meta, split=model.split, stage="grafted")
    path = ckpt_io.save(out / "checkpoint.ckpt", model, meta)
    print(json.dumps({"checkpoint": str(path), "groups": model.groups}))
    return 0


def cmd_train_fewshot(args: argparse.Namespace) -> int:
    resolved = resolve_config(args)
    resolved["train"] = replace(resolved["train"], stage="fewshot")
    basic = ckpt_io.load(args.ckpt)
    if basic.meta.stage != "basic" or len(basic.model.generator(Direction.REAL2CARTOON).branches) != 1:
        raise CLIError("train-fewshot needs a basic (single-branch) checkpoint")
    out = _out_dir(args)
    _echo_config(out, resolved, {"data": str(args.data), "ckpt": str(args.ckpt), "command": "train-fewshot"})
    split = resolved["split"] if _read_config(args.config).get("split") else None
    res = train_fewshot(
        args.data,
        basic,
        resolved["train"],
        resolved["weights"] if _read_config(args.config).get("weights") else None,
        split,
        out_dir=out,
        force=True,
        groups=_parse_groups(args.groups) if args.groups else None,
    )
    print(json.dumps({"checkpoint": str(res.path), "steps": len(res.trace), "groups": res.checkpoint.group_ids}))
    return 0


def _load_input(path: str, size: int) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im).astype(np.float32) / 127.5 - 1.0
    return to_tensor(arr)


def cmd_translate(args: argparse.Namespace) -> int:
    ck = ckpt_io.load(args.ckpt)
    output = Path(args.output)
    if output.exists() and not args.force:
        raise CLIError(f"{output} exists; pass --force to overwrite")
    x = _load_input(args.input, ck.meta.model.img_size)
    with torch.no_grad():
        y, _, _ = ck.model.translate(x, args.group, Direction(args.direction))
    output.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_image(y), "RGB").save(output)
    print(json.dumps({"output": str(output), "group": args.group, "direction": args.direction}))
    return 0


def cmd_attention(args: argparse.Namespace) -> int:
    ck = ckpt_io.load(args.ckpt)
    out = _out_dir(args)
    xs = [_load_input(p, ck.meta.model.img_size) for p in args.input]
    exports = ckpt_io.export_attention(ck.model, xs, args.group, out)
    print(json.dumps({"panels": [str(e.path) for e in exports]}))
    return 0


def inspect_checkpoint(ck: ckpt_io.Checkpoint) -> dict[str, Any]:
    m = ck.model
    g = m.generator(Direction.REAL2CARTOON)
    return {
        "format_version": ckpt_io.FORMAT_VERSION,
        "stage": ck.meta.stage,
        "group_ids": m.groups,
        "branches": g.branches,
        "split": {"n_enc_specific": g.n_enc_specific, "n_dec_specific": g.n_dec_specific},
        "model": to_dict(ck.meta.model),
        "weights": to_dict(ck.meta.weights),
        "seed": ck.meta.seed,
        "step": ck.meta.step,
        "n_parameters": sum(p.numel() for p in m.parameters()),
    }


def cmd_inspect(args: argparse.Namespace) -> int:
    print(json.dumps(inspect_checkpoint(ckpt_io.load(args.ckpt)), sort_keys=True))
    return 0


def _parse_groups(text: str) -> list[int]:
    try:
        return sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise CLIError(f"bad group list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-toon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="YAML/JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("synth-data", help="write a synthetic multi-group dataset")
    common(sp)
    sp.add_argument("--groups", type=int, default=4)
    sp.add_argument("--per-group", type=int, default=4)
    sp.add_argument("--size", type=int, default=32)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train-basic", help="stage 1 on group 0")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--size", type=int, help="crop size when the config does not set one")
    sp.set_defaults(func=cmd_train_basic)

    sp = sub.add_parser("graft", help="add group branches to a basic checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--groups", required=True, help="comma separated, e.g. 0,1,2,3")
    sp.set_defaults(func=cmd_graft)

    sp = sub.add_parser("train-fewshot", help="stage 2 with grafted branches")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--size", type=int)
    sp.add_argument("--groups")
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.set_defaults(func=cmd_train_fewshot)

    sp = sub.add_parser("translate", help="translate one image")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--group", type=int, default=0)
    sp.add_argument("--direction", choices=[d.value for d in Direction], default=Direction.REAL2CARTOON.value)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("attention", help="export CAM attention panels")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--group", type=int, default=0)
    sp.add_argument("--input", nargs="+", required=True)
    sp.set_defaults(func=cmd_attention)

    sp = sub.add_parser("inspect", help="print a checkpoint manifest")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1

if __name__ == "__main__":
    sys.exit(main())
