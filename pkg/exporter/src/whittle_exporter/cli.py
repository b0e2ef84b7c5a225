"""Batch export tool: turn a checkpoint plus calibration samples into the
compression toolkit's manifest, weight, and Gram files."""

from __future__ import annotations

import argparse
import importlib
import sys

import torch

from .export import DEFAULT_EXCLUDE, DEFAULT_INCLUDE, ExportError, ExportRecipe, export_grams, export_weights


def _recipe(args: argparse.Namespace) -> ExportRecipe:
    return ExportRecipe(
        checkpoint=args.checkpoint,
        out_dir=args.out,
        include=tuple(args.include) if args.include else DEFAULT_INCLUDE,
        exclude=tuple(args.exclude) if args.exclude is not None else DEFAULT_EXCLUDE,
        sample_count=getattr(args, "sample_count", 256),
        batch_size=getattr(args, "batch_size", 16),
        dump_activations=getattr(args, "dump_activations", False),
    )


def cmd_export_weights(args: argparse.Namespace) -> int:
    path = export_weights(_recipe(args))
    print(f"manifest -> {path}")
    return 0


def _resolve_factory(spec: str):
    mod_name, _, attr = spec.partition(":")
    if not attr:
        raise ExportError("--model-factory must look like package.module:callable")
    try:
        factory = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as e:
        raise ExportError(f"cannot import model factory {spec!r}: {e}") from e
    return factory


def cmd_export_grams(args: argparse.Namespace) -> int:
    recipe = _recipe(args)
    model = _resolve_factory(args.model_factory)()
    state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    model.load_state_dict(state)
    samples = torch.load(args.samples, map_location="cpu", weights_only=True)
    path = export_grams(recipe, model, samples)
    print(f"manifest with grams -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="whittle-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--checkpoint", required=True, help="torch checkpoint (.pt/.pth/.bin)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--include", action="append", help="glob pattern for layer names (repeatable)")
    common.add_argument("--exclude", action="append", help="glob pattern to skip (repeatable)")

    p = sub.add_parser("export-weights", parents=[common], help="extract 2-D projection weights")
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("export-grams", parents=[common], help="capture activations and accumulate Grams")
    p.add_argument("--model-factory", required=True, help="package.module:callable returning the nn.Module")
    p.add_argument("--samples", required=True, help="torch file with the calibration sample tensor")
    p.add_argument("--sample-count", type=int, dest="sample_count", default=256)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=16)
    p.add_argument("--dump-activations", action="store_true", dest="dump_activations")
    p.set_defaults(func=cmd_export_grams)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
