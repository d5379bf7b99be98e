"""Command-line entry point: gen, train-base, train-adapter, sample, eval, composite."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .compositor import composite
from .config import RunConfig, load_config
from .dataset import default_jobs, generate_dataset, load_dataset
from .diffusion.checkpoint import file_hash, load_checkpoint, save_checkpoint
from .diffusion.network import ArchConfig, CoupledDenoiser
from .diffusion.schedule import make_schedule
from .diffusion.training import OPTIMIZER, image_tensors, layer_latents, stack_latents, train_adapter, train_base
from .errors import ConfigError, ObjLayersError
from .guidance import GuidanceConfig
from .runs import environment_stamp, evaluate_dirs, is_dataset, prepare_output, sample_scenes

log = logging.getLogger("objlayers")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flag dest -> (section, key)
FLAG_KEYS = {
    "seed": ("global", "seed"),
    "jobs": ("global", "jobs"),
    "n_scenes": ("scenegen", "n_scenes"),
    "min_objects": ("scenegen", "min_objects"),
    "max_objects": ("scenegen", "max_objects"),
    "size": ("scenegen", "size"),
    "n_layers": ("scenegen", "n_layers"),
    "n_textures": ("scenegen", "n_textures"),
    "holdout": ("scenegen", "holdout"),
    "train_steps": ("train", "steps"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "cond_dropout": ("train", "cond_dropout"),
    "cosine": ("train", "cosine"),
    "snr_gamma": ("train", "snr_gamma"),
    "steps": ("sample", "steps"),
    "w": ("sample", "w"),
    "lam": ("sample", "lambda"),
    "cfg": ("sample", "cfg"),
    "period": ("sample", "period"),
    "exact_grad": ("sample", "exact_grad"),
    "no_guidance": ("sample", "no_guidance"),
    "n_seeds": ("sample", "n_seeds"),
    "split": ("sample", "split"),
    "limit": ("sample", "limit"),
}


class UsageError(ObjLayersError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="objlayers", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, out_help: str):
        p.add_argument("--config", type=Path, help="INI-style config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="worker processes (env COBL_SANDBOX_JOBS)")
        p.add_argument("--overwrite", action="store_true", help=f"replace an existing {out_help}")

    p = sub.add_parser("gen", help="generate a synthetic layered-scene dataset")
    common(p, "output directory")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--min-objects", type=int)
    p.add_argument("--max-objects", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-textures", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--out", type=Path, required=True)

    for name, helptext in (("train-base", "train the per-layer base denoiser"),
                           ("train-adapter", "train coupling and conditioning on a frozen base")):
        p = sub.add_parser(name, help=helptext)
        common(p, "checkpoint")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--steps", dest="train_steps", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--cosine", action="store_const", const=True, default=None)
        p.add_argument("--snr-gamma", type=float, help="min-SNR loss weighting (0 disables)")
        p.add_argument("--ckpt-out", type=Path, required=True)
        if name == "train-adapter":
            p.add_argument("--base-ckpt", type=Path, required=True)
            p.add_argument("--cond-dropout", type=float)

    p = sub.add_parser("sample", help="infer layer stacks for an image or a dataset")
    common(p, "output directory")
    p.add_argument("--ckpt", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path, help="PNG image")
    src.add_argument("--data", type=Path, help="dataset directory")
    p.add_argument("--split", help="dataset split to sample (default val)")
    p.add_argument("--limit", type=int, help="first N scenes of the split only")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--w", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--cfg", type=float)
    p.add_argument("--period", type=int)
    p.add_argument("--no-guidance", action="store_const", const=True, default=None)
    p.add_argument("--exact-grad", action="store_const", const=True, default=None)
    p.add_argument("--n-seeds", type=int)

    p = sub.add_parser("eval", help="score sampled stacks against ground truth")
    common(p, "report")
    p.add_argument("--pred", required=True, help="comma-separated sampling directories")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("composite", help="composite a stored stack, optionally diffing against a target")
    p.add_argument("--stack", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--target", type=Path, help="image to diff against (default: composite.png next to the stack)")
    p.add_argument("--overwrite", action="store_true")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
    return load_config(getattr(args, "config", None), overrides)


def _stamp(directory: Path, config: RunConfig, prefix: str = "", extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{prefix}resolved_config.ini").write_text(config.to_ini(), encoding="utf-8")
    io.write_json(directory / f"{prefix}environment.json", environment_stamp() | (extra or {}))


def _jobs(config: RunConfig) -> int:
    return default_jobs(config["global"]["jobs"] or None)


def cmd_gen(args, config: RunConfig) -> None:
    g = config["scenegen"]
    prepare_output(args.out, args.overwrite)
    ds = generate_dataset(
        g["n_scenes"], (g["min_objects"], g["max_objects"]), config["global"]["seed"], out_dir=args.out,
        canvas=(g["size"], g["size"]), n_layers=g["n_layers"], n_textures=g["n_textures"],
        holdout=None if g["holdout"] < 0 else g["holdout"], jobs=_jobs(config),
    )
    _stamp(args.out, config)
    print(f"wrote {len(ds)} scenes to {args.out}")


def _train_steps(config: RunConfig, n_items: int, batch: int) -> int:
    t = config["train"]
    return t["steps"] if t["steps"] > 0 else t["epochs"] * max(1, math.ceil(n_items / batch))


def cmd_train_base(args, config: RunConfig) -> None:
    t = config["train"]
    prepare_output(args.ckpt_out, args.overwrite, is_dir=False)
    ds = load_dataset(args.data)
    torch.manual_seed(config["global"]["seed"])
    schedule = make_schedule(t["T"], t["beta_start"], t["beta_end"], config["sample"]["steps"])
    model = CoupledDenoiser(ArchConfig(n_layers=ds.n_layers, height=ds.canvas[0], width=ds.canvas[1], T=t["T"]))
    layers = layer_latents(ds.stacks("train"))
    steps = _train_steps(config, len(layers), t["base_batch_size"])
    history = train_base(model, layers, schedule, steps, lr=t["lr"], batch_size=t["base_batch_size"],
                         seed=config["global"]["seed"], cosine=t["cosine"], snr_gamma=t["snr_gamma"] or None)
    meta = {"stage": "base", "optimizer": OPTIMIZER, "steps": steps, "final_loss": float(np.mean(history.loss[-50:]))}
    digest = save_checkpoint(args.ckpt_out, model, schedule, meta)
    _stamp(args.ckpt_out.parent, config, f"{args.ckpt_out.stem}.", {"checkpoint_sha256": digest})
    print(f"base checkpoint {args.ckpt_out} ({steps} steps, loss {meta['final_loss']:.4f})")


def cmd_train_adapter(args, config: RunConfig) -> None:
    t = config["train"]
    prepare_output(args.ckpt_out, args.overwrite, is_dir=False)
    ds = load_dataset(args.data)
    model, schedule, header = load_checkpoint(args.base_ckpt)
    torch.manual_seed(config["global"]["seed"])
    train = ds.split("train")
    images = image_tensors([r.scene.composite for r in train])
    stacks = stack_latents([r.scene.stack for r in train])
    steps = _train_steps(config, len(stacks), t["batch_size"])
    history = train_adapter(model, images, stacks, schedule, steps, lr=t["lr"], cond_dropout=t["cond_dropout"],
                            batch_size=t["batch_size"], seed=config["global"]["seed"], cosine=t["cosine"],
                            snr_gamma=t["snr_gamma"] or None)
    meta = {"stage": "adapter", "optimizer": OPTIMIZER, "steps": steps, "base_sha256": file_hash(args.base_ckpt),
            "final_loss": float(np.mean(history.loss[-50:]))}
    digest = save_checkpoint(args.ckpt_out, model, schedule, meta)
    _stamp(args.ckpt_out.parent, config, f"{args.ckpt_out.stem}.", {"checkpoint_sha256": digest})
    print(f"adapter checkpoint {args.ckpt_out} ({steps} steps, loss {meta['final_loss']:.4f})")


def guidance_from(config: RunConfig) -> GuidanceConfig:
    s = config["sample"]
    if s["no_guidance"]:
        return GuidanceConfig(w=0.0, lam=0.0, cfg_scale=s["cfg"], update_period=s["period"],
                              erase_visibility_threshold=s["erase_threshold"],
                              empty_alpha_threshold=s["empty_threshold"], sharpness=s["sharpness"])
    return GuidanceConfig(w=s["w"], lam=s["lambda"], cfg_scale=s["cfg"], update_period=s["period"],
                          erase_visibility_threshold=s["erase_threshold"], empty_alpha_threshold=s["empty_threshold"],
                          exact_gradient=True if s["exact_grad"] else None, sharpness=s["sharpness"])


def cmd_sample(args, config: RunConfig) -> None:
    s = config["sample"]
    prepare_output(args.out, args.overwrite)
    if args.image is not None:
        scenes = [(args.image.stem, io.read_image(args.image))]
    else:
        if not is_dataset(args.data):
            raise ConfigError(f"{args.data} is not a dataset directory")
        records = load_dataset(args.data).split(s["split"])
        if s["limit"] > 0:
            records = records[: s["limit"]]
        scenes = [(r.scene_id, r.scene.composite) for r in records]
    seed = config["global"]["seed"]
    seeds = list(range(seed, seed + s["n_seeds"]))
    results = sample_scenes(args.ckpt, scenes, seeds, guidance_from(config), s["steps"], args.out, _jobs(config))
    _stamp(args.out, config, extra={"checkpoint_sha256": file_hash(args.ckpt)})
    for r in results:
        print(f"{r['scene_id']} seed {r['seed']}: composite mse {r['composite_mse']:.5f}")


def cmd_eval(args, config: RunConfig) -> None:
    prepare_output(args.out, args.overwrite, is_dir=False)
    pred = [Path(p) for p in args.pred.split(",") if p]
    report = evaluate_dirs(pred, args.truth)
    io.write_json(args.out, report)
    _stamp(args.out.parent, config, f"{args.out.stem}.")
    agg = report["aggregate"]
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(agg.items())))


def cmd_composite(args, config: RunConfig) -> None:
    prepare_output(args.out, args.overwrite, is_dir=False)
    stack = io.read_stack(args.stack)
    image = composite(stack)
    io.write_image(args.out, image)
    target = args.target or (args.stack / "composite.png")
    if Path(target).exists():
        diff = np.abs(io.read_image(target) - io.read_image(args.out))
        print(f"max abs difference vs {target}: {diff.max():.6f} ({diff.max() * 255:.1f}/255)")


COMMANDS = {
    "gen": cmd_gen,
    "train-base": cmd_train_base,
    "train-adapter": cmd_train_adapter,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "composite": cmd_composite,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        config = resolve(args) if args.command != "composite" else load_config()
    except (UsageError, ConfigError) as exc:
        print(f"objlayers: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"objlayers: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ObjLayersError as exc:
        print(f"objlayers: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
