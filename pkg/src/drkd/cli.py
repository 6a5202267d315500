"""Command-line entry point: ``drkd <verb> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration. Failures
print one JSON object on stderr with ``error``, ``message`` and, for
configuration problems, the offending ``field``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import TEACHER_REF, ConfigError, ExperimentManifest, load_manifest, load_run_config
from .models import CheckpointError, load_checkpoint
from .report import accuracy_svg, merged_csv, series_labels, summarize
from .trainer import CHECKPOINT_NAME, METRICS_NAME, distill, evaluate, read_metrics_csv, train_baseline

log = logging.getLogger("drkd")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CommandError(RuntimeError):
    pass


def _fail(code: int, kind: str, message: str, field: str | None = None) -> int:
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def _load_cfg(args):
    if not args.config:
        raise ConfigError("--config", "a run config path is required")
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError("--config", f"config file not found: {path}")
    cfg = load_run_config(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if not cfg.output_dir:
        raise ConfigError("output_dir", "no output directory: set output_dir or pass --out")
    return cfg


def cmd_train_baseline(args) -> int:
    cfg = _load_cfg(args)
    if cfg.distill.needs_teacher:
        raise ConfigError("distill.framework", f"{cfg.distill.framework!r} needs a teacher; use the distill verb")
    ckpt, _ = train_baseline(cfg)
    log.info("wrote %s (test accuracy %.4f)", cfg.output_dir, ckpt.metadata["test_accuracy"])
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.distill.needs_teacher:
        raise ConfigError("distill.framework", f"{cfg.distill.framework!r} does not use a teacher; "
                                               "use the train-baseline verb")
    if not Path(cfg.teacher_checkpoint).is_file():
        raise FileNotFoundError(f"teacher checkpoint not found: {cfg.teacher_checkpoint}")
    ckpt, _ = distill(cfg)
    log.info("wrote %s (test accuracy %.4f)", cfg.output_dir, ckpt.metadata["test_accuracy"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "a checkpoint path is required")
    if not args.config:
        raise ConfigError("--config", "a run config naming the dataset is required")
    cfg = load_run_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    train, test = cfg.data.load()
    result = {"checkpoint": str(args.checkpoint), "train_accuracy": evaluate(ckpt, train),
              "test_accuracy": evaluate(ckpt, test)}
    print(json.dumps(result))
    return EXIT_OK


def _cell_done(out: Path) -> bool:
    return (out / METRICS_NAME).is_file() and (out / CHECKPOINT_NAME).is_file()


def run_experiment(manifest: ExperimentManifest, retrain: bool = False) -> dict:
    """Train every teacher and (arm, seed) cell not already on disk; return summary cells.

    Cells run sequentially. A finished cell (metrics and checkpoint present) is
    reused, so an interrupted comparison resumes where it stopped.
    """
    root = Path(manifest.output_dir)

    def _cell(label: str, cfg, out: Path):
        if not retrain and _cell_done(out):
            log.info("reusing %s", out)
            return
        log.info("training %s", label)
        try:
            (distill if cfg.distill.needs_teacher else train_baseline)(cfg)
        except Exception as exc:
            raise CommandError(f"cell {label} failed: {exc}") from exc

    for seed in manifest.seeds:
        for tname, tcfg in manifest.teachers.items():
            out = root / "teachers" / tname / f"seed{seed}"
            _cell(f"teachers/{tname}/seed{seed}",
                  replace(tcfg.with_seed(seed), output_dir=str(out), name=f"teacher-{tname}-seed{seed}"), out)
    cells: dict[str, dict] = {}
    for arm, base_cfg in manifest.arms.items():
        runs = []
        for seed in manifest.seeds:
            out = root / arm / f"seed{seed}"
            cfg = replace(base_cfg.with_seed(seed), output_dir=str(out), name=f"{arm}-seed{seed}")
            ref = cfg.teacher_checkpoint or ""
            if ref.startswith(TEACHER_REF):
                tname = ref[len(TEACHER_REF):]
                cfg = replace(cfg, teacher_checkpoint=str(root / "teachers" / tname / f"seed{seed}" / CHECKPOINT_NAME))
            _cell(f"{arm}/seed{seed}", cfg, out)
            records = read_metrics_csv(out / METRICS_NAME)
            acc = records[-1].test_accuracy if records else \
                load_checkpoint(out / CHECKPOINT_NAME).metadata["test_accuracy"]
            runs.append((acc, records))
        cells[arm] = {"framework": base_cfg.distill.framework, "runs": runs}
    return cells


def cmd_compare(args) -> int:
    path = args.manifest or args.config
    if not path:
        raise ConfigError("--manifest", "a manifest path is required")
    manifest = load_manifest(path)
    if args.seed is not None:
        manifest = replace(manifest, seeds=(args.seed,))
    if args.out is not None:
        manifest = replace(manifest, output_dir=args.out)
    cells = run_experiment(manifest)
    report = summarize(manifest.name, manifest.seeds, manifest.baseline_arm, cells)
    root = Path(manifest.output_dir)
    (root / "report.json").write_text(report.to_json(), encoding="utf-8")
    (root / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    if not args.quiet:
        print(report.to_markdown())
    return EXIT_OK


def cmd_report(args) -> int:
    paths = args.metrics
    if not paths:
        raise ConfigError("metrics", "at least one metrics CSV is required")
    out = Path(args.out or "report.svg")
    series = {}
    for label, p in zip(series_labels(paths), paths):
        if not Path(p).is_file():
            raise FileNotFoundError(f"metrics file not found: {p}")
        recs = read_metrics_csv(p)
        if not recs:
            raise CommandError(f"{p}: no data rows")
        series[label] = recs
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(accuracy_svg(series, args.title), encoding="utf-8")
    out.with_suffix(".csv").write_text(merged_csv(series), encoding="utf-8")
    log.info("wrote %s and %s", out, out.with_suffix(".csv"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON)")
    common.add_argument("--out", help="output directory (file for report)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    parser = argparse.ArgumentParser(prog="drkd", description="Dynamic-rectification distillation experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("train-baseline", parents=[common], help="stage 1: train with cross-entropy or LSR") \
        .set_defaults(func=cmd_train_baseline)
    sub.add_parser("distill", parents=[common], help="stage 2: distill from a frozen teacher") \
        .set_defaults(func=cmd_distill)
    p = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint on a config's dataset")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("compare", parents=[common], help="run every arm x seed of a manifest and report")
    p.add_argument("manifest", nargs="?", help="experiment manifest (JSON)")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("report", parents=[common], help="accuracy chart from metrics CSVs")
    p.add_argument("metrics", nargs="*", help="metrics CSV files")
    p.add_argument("--title", default="Test accuracy")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.field)
    except FileNotFoundError as exc:
        missing = exc.filename if exc.filename else None
        msg = f"file not found: {missing}" if missing else str(exc)
        return _fail(EXIT_RUNTIME, "runtime", msg)
    except (CheckpointError, CommandError, ValueError, RuntimeError, OSError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", str(exc))


if __name__ == "__main__":
    sys.exit(main())
