"""Command-line entry point: ``sketchpatch <subcommand> [flags]``.

Every run prints its resolved settings as ``key=value`` lines before doing
any work. Failures exit nonzero with one ``error[<class>]: ...`` line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import gradcheck, image, nets, patches, stylizer, synth, trainer
from .tensor import DimensionError, NumericError

EXIT_USAGE = 2
EXIT_CODES = {
    "check": 1,
    "input": 3,
    "alignment": 4,
    "config": 5,
    "numeric": 6,
    "checkpoint": 7,
    "empty": 8,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _print_settings(settings: Dict[str, object]) -> None:
    for key, value in settings.items():
        print(f"{key}={value}")


def _load_image(path: str) -> image.GrayImage:
    try:
        return image.load(path)
    except FileNotFoundError as exc:
        raise CliError("input", f"{path}: no such file") from exc
    except image.ImageFormatError as exc:
        raise CliError("input", str(exc)) from exc


def _load_checkpoint(path: str) -> nets.ModelParams:
    try:
        return nets.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError("checkpoint", f"{path}: no such file") from exc
    except nets.CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("checkpoint", f"{path}: malformed header ({exc})") from exc


# ---------------------------------------------------------------- subcommands


def cmd_synth_style(args) -> int:
    try:
        spec = synth.StyleSpec.parse(args.style)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    if args.plain is not None:
        plain = _load_image(args.plain)
        source = args.plain
    else:
        plain = synth.synth_sketch(args.size, seed=args.seed, stroke=args.stroke, shapes=args.shapes)
        source = f"synthetic(size={args.size},seed={args.seed})"
    _print_settings({"plain": source, "style": spec, "out": args.out, "plain_out": args.plain_out})
    image.save(synth.synth_style(plain, spec), args.out)
    if args.plain_out:
        image.save(plain, args.plain_out)
    return 0


def cmd_mine(args) -> int:
    _print_settings(
        {
            "plain": args.plain,
            "styled": args.styled,
            "out": args.out,
            "patch_size": args.patch_size,
            "rotation_step": args.rotation_step,
            "stride": args.stride,
            "threshold": args.threshold,
        }
    )
    plain = _load_image(args.plain)
    styled = _load_image(args.styled)
    try:
        ds = patches.mine_dataset(
            [(Path(args.styled).stem, plain, styled)],
            args.patch_size,
            args.rotation_step,
            args.stride,
            args.threshold,
        )
    except patches.AlignmentError as exc:
        raise CliError("alignment", str(exc)) from exc
    except patches.EmptyDatasetError as exc:
        raise CliError("empty", str(exc)) from exc
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    patches.write_dataset(ds, args.out)
    print(f"pairs={len(ds)}")
    return 0


_TRAIN_FLAGS = (
    "iterations",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "delta",
    "seed",
    "checkpoint_every",
    "base_width",
    "res_blocks",
    "down_levels",
    "generator",
    "adversarial",
    "shape",
)


def resolve_train_config(args, base: Optional[trainer.TrainConfig] = None) -> trainer.TrainConfig:
    """Defaults (``base``), then the config file, then explicit flags."""
    try:
        cfg = base or trainer.TrainConfig()
        if args.config:
            cfg = trainer.load_config(args.config, cfg)
        overrides = {k: str(getattr(args, k)) for k in _TRAIN_FLAGS if getattr(args, k) is not None}
        if args.checkpoint_every is not None or cfg.checkpoint_every:
            overrides["out_dir"] = str(Path(args.out).parent)
        return trainer.config_from_mapping(overrides, cfg)
    except FileNotFoundError as exc:
        raise CliError("config", f"{args.config}: no such file") from exc
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc


def cmd_train(args) -> int:
    try:
        ds = patches.read_dataset(args.dataset)
    except FileNotFoundError as exc:
        raise CliError("input", f"{args.dataset}: {exc}") from exc
    except patches.EmptyDatasetError as exc:
        raise CliError("empty", str(exc)) from exc
    except (ValueError, image.ImageFormatError) as exc:
        raise CliError("input", f"{args.dataset}: {exc}") from exc
    cfg = resolve_train_config(args, trainer.TrainConfig(patch_size=ds.patch_size))
    trace_path = args.trace or str(Path(args.out).with_suffix(".csv"))
    print(cfg.to_text(), end="")
    _print_settings({"dataset": args.dataset, "pairs": len(ds), "out": args.out, "trace": trace_path})

    def progress(it: int, row: Dict) -> None:
        if args.log_every and (it % args.log_every == 0 or it == cfg.iterations - 1):
            shown = " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float))
            print(f"iter {it} {shown}", flush=True)

    try:
        result = trainer.train(ds, cfg, progress=progress)
    except trainer.TrainingDivergedError as exc:
        raise CliError("numeric", str(exc)) from exc
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    nets.save_checkpoint(result.params, args.out, extra={"iteration": cfg.iterations, "variant": cfg.variant})
    trainer.write_trace(result.trace, trace_path)
    return 0


def _parse_root(text: str):
    if text == "raster":
        return "raster", None
    kind, _, seed = text.partition(":")
    if kind == "random" and seed.lstrip("-").isdigit():
        return "random", int(seed)
    raise CliError("config", f"--root must be raster or random:SEED, got {text!r}")


def _parse_pre(text: Optional[str]):
    if text is None:
        return None
    kind, _, radius = text.partition(":")
    if kind not in ("erode", "dilate") or not radius.isdigit():
        raise CliError("config", f"--pre must be erode:R or dilate:R, got {text!r}")
    return kind, int(radius)


def cmd_stylize(args) -> int:
    root, root_seed = _parse_root(args.root)
    pre = _parse_pre(args.pre)
    region = None
    if args.seed_orientation:
        try:
            region = stylizer.SeedRegion.parse(args.seed_orientation)
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
        if not args.seed_exemplar:
            raise CliError("config", "--seed-orientation needs --seed-exemplar")
    _print_settings(
        {
            "sketch": args.sketch,
            "checkpoint": args.checkpoint,
            "out": args.out,
            "patch_size": args.patch_size,
            "overlap": args.overlap,
            "order": args.order,
            "root": args.root,
            "pre": args.pre,
            "conditioning": not args.no_conditioning,
            "seed_orientation": args.seed_orientation,
            "seed_exemplar": args.seed_exemplar,
        }
    )
    sketch = _load_image(args.sketch)
    params = _load_checkpoint(args.checkpoint)
    if pre is not None:
        op = image.erode if pre[0] == "erode" else image.dilate
        sketch = op(sketch, pre[1])
    options = stylizer.StylizeOptions(
        order=args.order,
        root=root,
        root_seed=root_seed,
        conditioning=not args.no_conditioning,
        seed_region=region,
        seed_exemplar=_load_image(args.seed_exemplar) if args.seed_exemplar else None,
    )
    if args.overlap < 0 or args.overlap >= args.patch_size:
        raise CliError("config", "--overlap must satisfy 0 <= overlap < patch-size")
    try:
        out = stylizer.stylize(sketch, params, args.patch_size, args.overlap, options)
    except stylizer.EmptySketchError as exc:
        raise CliError("empty", str(exc)) from exc
    except DimensionError as exc:
        raise CliError("config", f"patch size does not suit the checkpoint: {exc}") from exc
    except NumericError as exc:
        raise CliError("numeric", str(exc)) from exc
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    image.save(out, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    _print_settings({"seed": args.seed, "step": gradcheck.STEP, "tolerance": gradcheck.TOLERANCE})
    report = gradcheck.run_all(args.seed)
    for r in report.results:
        print(f"{r.name}: max_rel_error={r.max_error:.3e} coords={r.checked}")
    print(f"max relative error {report.max_error:.3e}")
    if not report.ok:
        raise CliError("check", f"max relative error {report.max_error:.3e} >= {gradcheck.TOLERANCE}")
    return 0


def cmd_seam_report(args) -> int:
    _print_settings({"image": args.image, "patch_size": args.patch_size, "overlap": args.overlap})
    img = _load_image(args.image)
    if args.overlap < 0 or args.overlap >= args.patch_size:
        raise CliError("config", "--overlap must satisfy 0 <= overlap < patch-size")
    grid = stylizer.build_grid(img, args.patch_size, args.overlap)
    print(f"seam_metric={stylizer.seam_metric(img, grid):.6f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchpatch", description="Patch-level sketch stylization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-style", help="render a styled exemplar from a plain sketch")
    p.add_argument("--plain", help="plain sketch image; omit to draw a random one")
    p.add_argument("--style", default="stripes:period=8,thickness=4", help="KIND[:key=value,...]")
    p.add_argument("--out", required=True)
    p.add_argument("--plain-out", help="also write the plain sketch here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--stroke", type=int, default=3)
    p.add_argument("--shapes", type=int, default=7)
    p.set_defaults(func=cmd_synth_style)

    p = sub.add_parser("mine", help="cut aligned patch pairs from an exemplar pair")
    p.add_argument("plain")
    p.add_argument("styled")
    p.add_argument("out", help="dataset directory")
    p.add_argument("--patch-size", type=int, default=patches.DEFAULT_PATCH_SIZE)
    p.add_argument("--rotation-step", type=float, default=patches.DEFAULT_ROTATION_STEP)
    p.add_argument("--stride", type=int, default=patches.DEFAULT_STRIDE)
    p.add_argument("--threshold", type=float, default=image.INK_THRESHOLD)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train a patch translator on a mined dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss CSV path (default: checkpoint path with .csv)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--res-blocks", dest="res_blocks", type=int)
    p.add_argument("--down-levels", dest="down_levels", type=int)
    p.add_argument("--generator", choices=("resnet", "identity"))
    p.add_argument("--adversarial", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--shape", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stylize", help="stylize a whole sketch with a trained checkpoint")
    p.add_argument("sketch")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--root", default="raster", help="raster or random:SEED")
    p.add_argument("--order", choices=("bfs", "raster"), default="bfs")
    p.add_argument("--pre", help="erode:R or dilate:R stroke-weight adjustment")
    p.add_argument("--seed-orientation", help="REGION as y,x,h,w[@src_y,src_x] inside the first patch")
    p.add_argument("--seed-exemplar", help="styled exemplar the seed region is copied from")
    p.add_argument("--no-conditioning", action="store_true", help="translate every patch from plain pixels only")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the training loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("seam-report", help="seam metric of an image for a given patch grid")
    p.add_argument("image")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--overlap", type=int, default=16)
    p.set_defaults(func=cmd_seam_report)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (None, 0) else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.kind]
    except OSError as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return EXIT_CODES["input"]


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
