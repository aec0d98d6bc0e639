#!/usr/bin/env python3
"""
Command-line interface for the Multiview-Mammo pipeline.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 I/O error, 4 training refused, 5 format version mismatch, 6 integrity error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from ..config.settings import PipelineConfig, load_config
from ..core.errors import IntegrityError, MammoError
from ..core.ingestion import load_manifest, validate_dataset, count_table
from ..core.labels import ALL_VIEWS, LabelScheme, ViewTag
from ..core.pipeline import MODES, MammoPipeline
from ..core.synthgen import generate_dataset

logger = logging.getLogger("mammo_multiview")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def _view_arg(text: str) -> List[ViewTag]:
    if text.strip().lower() == "all":
        return list(ALL_VIEWS)
    try:
        return [ViewTag.parse(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON config overlaid on the defaults")
    common.add_argument("--seed", type=int, help="Seed applied to every stage")
    common.add_argument("--scheme", choices=["birads5", "pathology3"], help="Diagnosis label scheme")
    common.add_argument("--out", "-o", help="Output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="Echo warnings to stderr")

    parser = argparse.ArgumentParser(
        prog="mammo-multiview",
        description="Multiview-Mammo: two-stage multi-view mammogram classification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mammo-multiview synth --out data
  mammo-multiview split --manifest data/manifest.csv --force
  mammo-multiview train-extractor --manifest data/manifest.csv --view all --out run
  mammo-multiview pipeline --synth --out run --jobs 4
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")

    p = sub.add_parser("split", parents=[common], help="Assign train/val/test splits")
    p.add_argument("--manifest", "-m", help="Manifest CSV")
    p.add_argument("--force", action="store_true", help="Replace an existing split column")

    p = sub.add_parser("validate", parents=[common], help="Check four-view structure and class counts")
    p.add_argument("--manifest", "-m", help="Manifest CSV")
    p.add_argument("--json", "-j", action="store_true", help="Print the report as JSON")

    p = sub.add_parser("train-extractor", parents=[common], help="Train per-view extractors")
    p.add_argument("--manifest", "-m", help="Manifest CSV")
    p.add_argument("--view", type=_view_arg, default=list(ALL_VIEWS),
                   help="L-CC, R-CC, L-MLO, R-MLO or all")
    p.add_argument("--jobs", type=int, help="Parallel training processes")

    p = sub.add_parser("extract", parents=[common], help="Write per-view feature files")
    p.add_argument("--manifest", "-m", help="Manifest CSV")
    p.add_argument("--view", type=_view_arg, default=list(ALL_VIEWS),
                   help="L-CC, R-CC, L-MLO, R-MLO or all")

    p = sub.add_parser("fuse", parents=[common], help="Build classifier tables from feature files")
    p.add_argument("--manifest", "-m", help="Manifest CSV used to reject orphan feature rows")
    p.add_argument("--mode", choices=list(MODES) + ["both"], default="multi")

    p = sub.add_parser("train-gbdt", parents=[common], help="Train diagnosis and density forests")
    p.add_argument("--mode", choices=list(MODES) + ["both"], default="multi")

    p = sub.add_parser("evaluate", parents=[common], help="Score a trained pipeline")
    p.add_argument("--manifest", "-m", help="Manifest CSV (counts studies without predictions)")
    p.add_argument("--mode", choices=list(MODES) + ["both"], default="both")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = sub.add_parser("pipeline", parents=[common], help="Run single-view and multi-view end to end")
    p.add_argument("--manifest", "-m", help="Manifest CSV")
    p.add_argument("--synth", action="store_true", help="Generate the synthetic dataset first")
    p.add_argument("--jobs", type=int, help="Parallel extractor trainings")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.scheme is not None:
        config = config.with_scheme(args.scheme)
    return config


def configure_logging(out_dir: Path, verbose: bool) -> List[logging.Handler]:
    """Full log to ``<out>/run.log``; errors (warnings with --verbose) to stderr."""
    out_dir.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter(LOG_FORMAT)
    file_handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    file_handler.setLevel(logging.INFO)
    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setLevel(logging.WARNING if verbose else logging.ERROR)
    handlers = [file_handler, stream_handler]
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return handlers


def _out_dir(args: argparse.Namespace, config: PipelineConfig) -> Path:
    if args.out:
        return Path(args.out)
    default = config.paths.workspace if args.command == "synth" else config.paths.outputs
    return Path(default)


def _manifest_path(args: argparse.Namespace, config: PipelineConfig) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return Path(config.paths.workspace) / config.paths.manifest


def _modes(mode: str) -> Sequence[str]:
    return MODES if mode == "both" else (mode,)


def cmd_synth(args, config: PipelineConfig, out_dir: Path) -> int:
    dataset = generate_dataset(config.synth, out_dir)
    print(f"Wrote {len(dataset.manifest.studies())} studies ({len(dataset.manifest.rows)} images) "
          f"to {dataset.manifest_path}")
    return 0


def cmd_split(args, config: PipelineConfig, out_dir: Path) -> int:
    path = _manifest_path(args, config)
    scheme = LabelScheme.from_name(config.scheme)
    manifest = load_manifest(path, scheme, check_files=False)
    pipeline = MammoPipeline(config, out_dir)
    manifest = pipeline.split(manifest, path, force=args.force)
    print(pipeline.split_table(manifest), end="")
    return 0


def cmd_validate(args, config: PipelineConfig, out_dir: Path) -> int:
    manifest = load_manifest(_manifest_path(args, config), LabelScheme.from_name(config.scheme))
    report = validate_dataset(manifest)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(f"{report.n_studies} studies, {report.n_images} images, {len(report.findings)} findings")
        for finding in report.findings:
            print(f"  [{finding.severity}] {finding.kind} {finding.study_id}: {finding.detail}")
        print(count_table(report), end="")
    if not report.is_valid:
        raise IntegrityError(f"{len(report.findings)} findings, including errors")
    return 0


def cmd_train_extractor(args, config: PipelineConfig, out_dir: Path) -> int:
    manifest = load_manifest(_manifest_path(args, config), LabelScheme.from_name(config.scheme))
    pipeline = MammoPipeline(config, out_dir)
    results = pipeline.train_extractors(manifest, args.view, args.jobs or config.jobs)
    for tag, (_, log) in results.items():
        print(f"{tag.name}: best epoch {log.best_epoch} of {len(log.epochs)}, "
              f"val macro-F1 {log.best_score:.4f} -> {pipeline.model_path(tag)}")
    return 0


def cmd_extract(args, config: PipelineConfig, out_dir: Path) -> int:
    manifest = load_manifest(_manifest_path(args, config), LabelScheme.from_name(config.scheme))
    written = MammoPipeline(config, out_dir).extract(manifest, args.view)
    for (tag, split), matrix in written.items():
        print(f"{tag.name} {split}: {len(matrix)} rows")
    return 0


def cmd_fuse(args, config: PipelineConfig, out_dir: Path) -> int:
    manifest = None
    if args.manifest:
        manifest = load_manifest(args.manifest, LabelScheme.from_name(config.scheme), check_files=False)
    pipeline = MammoPipeline(config, out_dir)
    for mode in _modes(args.mode):
        for split, table in pipeline.fuse_all(mode, manifest).items():
            incomplete = int((table.views_present != 3).sum()) if mode == "multi" else 0
            print(f"{mode} {split}: {len(table)} rows, {incomplete} warnings")
    return 0


def cmd_train_gbdt(args, config: PipelineConfig, out_dir: Path) -> int:
    pipeline = MammoPipeline(config, out_dir)
    for mode in _modes(args.mode):
        for target, forest in pipeline.train_gbdt(mode).items():
            print(f"{mode} {target}: {len(forest.rounds)} rounds -> {pipeline.forest_path(mode, target)}")
    return 0


def cmd_evaluate(args, config: PipelineConfig, out_dir: Path) -> int:
    manifest = None
    if args.manifest:
        manifest = load_manifest(args.manifest, LabelScheme.from_name(config.scheme), check_files=False)
    pipeline = MammoPipeline(config, out_dir)
    modes = _modes(args.mode)
    if len(modes) == 2:
        print(pipeline.compare(manifest, args.split).render(), end="")
        return 0
    reports = pipeline.evaluate(modes[0], args.split, manifest)
    print((out_dir / f"report_{modes[0]}.txt").read_text(encoding="utf-8"), end="")
    logger.info("macro-F1 %s", reports.macro())
    return 0


def cmd_pipeline(args, config: PipelineConfig, out_dir: Path) -> int:
    scheme = LabelScheme.from_name(config.scheme)
    pipeline = MammoPipeline(config, out_dir)
    if args.synth:
        dataset = generate_dataset(config.synth, out_dir / "data")
        manifest = dataset.manifest
    else:
        path = _manifest_path(args, config)
        manifest = load_manifest(path, scheme)
        if not manifest.split_column_present:
            manifest = pipeline.split(manifest, out_dir / "manifest.csv")
    report = pipeline.run(manifest, jobs=args.jobs or config.jobs)
    print(report.render(), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "validate": cmd_validate,
    "train-extractor": cmd_train_extractor,
    "extract": cmd_extract,
    "fuse": cmd_fuse,
    "train-gbdt": cmd_train_gbdt,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except MammoError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code

    out_dir = _out_dir(args, config)
    handlers: List[logging.Handler] = []
    try:
        handlers = configure_logging(out_dir, args.verbose)
        return COMMANDS[args.command](args, config, out_dir)
    except MammoError as e:
        logger.error("%s failed: %s", args.command, e)
        if not handlers:
            print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        logger.exception("%s failed", args.command)
        if not handlers:
            print(f"Error: {e}", file=sys.stderr)
        return 1
    finally:
        for handler in handlers:
            logger.removeHandler(handler)
            handler.close()


def main():
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
