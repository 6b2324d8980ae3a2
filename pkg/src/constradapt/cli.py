"""Command-line harness: ``constradapt <subcommand> ...``.

Every experiment flag mirrors a field of the JSON spec; flags given on the
command line override values loaded with ``--spec``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .data import GenerationError, ManifestError, SliceData, load_manifest, manifest_summary
from .experiment import (EXIT_EVAL, EXIT_OK, EXIT_SPEC, OUTPUT_ROOT_ENV, ExperimentSpec, SpecError,
                         evaluate_model, generate_splits, run_experiment, write_splits)
from .model import CheckpointError, SegmentationModel, load_checkpoint
from .report import ReportError, report
from .trainer import METHODS

log = logging.getLogger("constradapt")

# flag dest -> AdaptConfig field
CONFIG_FLAGS = {
    "gamma": "gamma", "lr_seg": "lr_seg", "lr_reg": "lr_reg", "seed": "seed",
    "pretrain_epochs": "pretrain_epochs", "adapt_epochs": "adapt_epochs",
    "regressor_epochs": "regressor_epochs", "batch_size": "batch_size",
    "source_loss": "source_loss", "optimizer": "optimizer",
    "regressor_optimizer": "regressor_optimizer", "width": "width",
}


def parse_size(text: str) -> list[int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}") from None
    return [h, w]


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--spec", type=Path, help="JSON experiment spec")
    p.add_argument("--data", type=Path, help="directory written by `generate`")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--regime", choices=("oracle_margin", "learned", "source_stats", "tags_only"))
    p.add_argument("--margin", type=float)
    p.add_argument("--no-tags", action="store_true", help="ignore target image tags")
    p.add_argument("--grid-search", action="store_true")
    p.add_argument("--gamma-grid", type=float, nargs="+")
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr-seg", type=float)
    p.add_argument("--lr-reg", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--adapt-epochs", type=int)
    p.add_argument("--regressor-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--source-loss", choices=("CE", "Dice+CE"))
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--regressor-optimizer", choices=("adam", "sgd"))
    p.add_argument("--width", type=int)
    p.add_argument("--pretrained", type=Path, help="reuse a pretrained segmentation checkpoint")
    p.add_argument("--regressor", type=Path, help="reuse a trained regressor checkpoint")
    p.add_argument("--name")
    p.add_argument("--out", type=Path, help=f"output root (env {OUTPUT_ROOT_ENV} wins)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="constradapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic source/target dataset")
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--slices", type=int, required=True)
    g.add_argument("--size", type=parse_size, required=True, help="HxW, e.g. 32x32")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--shift", default="mri_like", help="preset name or ShiftSpec JSON")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)

    for name, text in (("pretrain", "source-only supervised training"),
                       ("train-regressor", "fit the size regressor"),
                       ("adapt", "full pipeline: pretrain, regressor, adapt, evaluate")):
        _add_experiment_flags(sub.add_parser(name, help=text))

    e = sub.add_parser("evaluate", help="DSC/HD95 of a checkpoint on a manifest")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("runs", type=Path, nargs="+")
    r.add_argument("--out", type=Path)
    return parser


def spec_from_args(args) -> ExperimentSpec:
    raw = json.loads(args.spec.read_text()) if args.spec else {}
    if args.spec and not isinstance(raw, dict):
        raise SpecError("spec must be a JSON object")
    if args.data:
        raw["dataset"] = {"manifests": {"dir": str(args.data)}}
    cfg = dict(raw.get("config", {}))
    for flag, key in CONFIG_FLAGS.items():
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    regime = dict(cfg.get("regime", {}))
    if args.regime:
        regime["kind"] = args.regime
    if args.margin is not None:
        regime["margin"] = args.margin
    if args.no_tags:
        regime["use_tags"] = False
    if regime.get("kind") == "oracle_margin":
        regime["allow_ground_truth"] = True
    if regime:
        cfg["regime"] = regime
    if args.gamma_grid:
        cfg["gamma_grid"] = args.gamma_grid
    if args.method:
        raw["method"] = args.method
        cfg["method"] = args.method
    elif "method" in raw:
        cfg.setdefault("method", raw["method"])
    raw["config"] = cfg
    if args.grid_search:
        raw["grid_search"] = True
    for key in ("pretrained", "regressor"):
        if getattr(args, key):
            raw[key] = str(getattr(args, key))
    if args.name:
        raw["name"] = args.name
    if args.out:
        raw["output_dir"] = str(args.out)
    return ExperimentSpec.from_json(raw)


def cmd_generate(args) -> int:
    g = {"subjects": args.subjects, "slices": args.slices, "size": args.size,
         "classes": args.classes, "shift": args.shift, "seed": args.seed,
         "fractions": {"source": {"train": 0.8, "val": 0.2},
                       "target": {"train": 0.6, "val": 0.2, "test": 0.2}}}
    try:
        splits = generate_splits(g)
    except (ValueError, GenerationError) as exc:
        return _error(f"generation failed: {exc}", EXIT_SPEC)
    paths = write_splits(splits, args.out)
    info = {name: manifest_summary(m) for name, m in splits.items()}
    (args.out / "dataset.json").write_text(json.dumps({"generate": g, "splits": info}, indent=1))
    for name, path in paths.items():
        print(f"{name:14s} {len(splits[name]):5d} slices  {path}")
    return EXIT_OK


PHASES_FOR = {"pretrain": ("pretrain",), "train-regressor": ("regressor",),
              "adapt": ("pretrain", "regressor", "adapt", "evaluate")}


def cmd_experiment(args) -> int:
    try:
        spec = spec_from_args(args)
    except (SpecError, json.JSONDecodeError, OSError) as exc:
        return _error(f"spec error: {exc}", EXIT_SPEC)
    phases = PHASES_FOR[args.command]
    if args.command == "train-regressor" and spec.config.method not in ("ConstraintAdap", "KLAdap"):
        return _error("train-regressor needs method ConstraintAdap or KLAdap", EXIT_SPEC)
    result = run_experiment(spec, phases)
    if result.status != EXIT_OK:
        return _error(f"{result.error} (artifacts kept in {result.run_dir})", result.status)
    print(result.run_dir)
    summary = result.summary
    if "dsc" in summary:
        print(f"{summary['method']}: DSC {100 * summary['dsc']['mean']:.1f} "
              f"on {summary['eval_split']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
        model = load_checkpoint(args.checkpoint, k=manifest.k, arch=SegmentationModel.arch_id)
    except (ManifestError, CheckpointError, FileNotFoundError) as exc:
        return _error(str(exc), EXIT_SPEC)
    try:
        rep = evaluate_model(model, SliceData(manifest))
    except Exception as exc:
        return _error(str(exc), EXIT_EVAL)
    args.out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(args.out / "metrics.csv")
    rep.write_json(args.out / "metrics.json")
    print(f"DSC {100 * rep.mean_dsc:.1f}  HD95 {rep.mean_hd95:.2f}  -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out or Path(args.runs[0]).parent / f"report-{time.strftime('%Y%m%d-%H%M%S')}"
    try:
        paths = report(args.runs, out)
    except ReportError as exc:
        return _error(str(exc), EXIT_SPEC)
    print(paths["text"].read_text(), end="")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _error(msg, code):
    print(f"error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "generate":
        return cmd_generate(args)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    if args.command == "report":
        return cmd_report(args)
    return cmd_experiment(args)


if __name__ == "__main__":
    sys.exit(main())
