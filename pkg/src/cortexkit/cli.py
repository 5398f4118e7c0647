"""Command line entry point: ``cortexkit <command> [options]``.

Exit codes: 0 success, 1 input error (missing/invalid files or options),
2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .errors import CortexKitError, NumericalError

log = logging.getLogger("cortexkit")

COMMANDS = (*pipeline.STAGES, "all", "phantom")
CONFIG_KEYS = ("subject_dir", "label_table", "threads", "hemi", "seed", "view_weights", "axes", "stages")


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes equal underscores."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _triple(text: str, conv, flag: str) -> tuple:
    parts = [conv(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"{flag} expects three comma-separated numbers")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--subject-dir", type=Path)
    common.add_argument("--label-table", type=Path, help="label table TSV (default: shipped DKT table)")
    common.add_argument("--threads", type=int)
    common.add_argument("--hemi", choices=("left", "right", "both"))
    common.add_argument("--seed", type=int)
    common.add_argument("--view-weights", help="coronal,axial,sagittal weights, e.g. 1,1,0.5")
    common.add_argument("--axes", help="volume axes tracked by eigenfunctions 1..3 (default 0,1,2)")

    parser = argparse.ArgumentParser(prog="cortexkit", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name in pipeline.STAGES else None)
        if name == "stats":
            p.add_argument("--measures", type=Path, help="subjects x ROI CSV for ICC / GLM group statistics")
            p.add_argument("--covariates", default="age,sex", help="GLM covariates (default age,sex)")
    return parser


def resolve_config(args) -> pipeline.PipelineConfig:
    file_values = read_config(args.config) if args.config else {}

    def pick(name, default=None):
        flag = getattr(args, name, None)
        return flag if flag is not None else file_values.get(name, default)

    subject_dir = pick("subject_dir")
    if subject_dir is None:
        raise ValueError("--subject-dir is required (flag or config file)")
    if args.command == "all":
        stages = pipeline.STAGES
        if "stages" in file_values:
            stages = tuple(s.strip() for s in file_values["stages"].split(",") if s.strip())
    elif args.command in pipeline.STAGES:
        stages = (args.command,)
    else:
        stages = ()
    label_table = pick("label_table")
    return pipeline.PipelineConfig(
        subject_dir=Path(subject_dir),
        label_table=Path(label_table) if label_table else None,
        stages=stages,
        threads=int(pick("threads", 1)),
        hemi=str(pick("hemi", "both")),
        seed=int(pick("seed", 0)),
        view_weights=_triple(pick("view_weights", "1,1,0.5"), float, "--view-weights"),
        axes=_triple(pick("axes", "0,1,2"), int, "--axes"),
    )


def configure_logging() -> None:
    level = os.environ.get("CORTEXKIT_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        print(f"cortexkit: {exc}", file=sys.stderr)
        return 1

    if args.command == "phantom":
        out = pipeline.write_phantom(cfg.subject_dir, cfg.seed)
        print(f"phantom written to {out}")
        return 0

    if args.command == "stats" and args.measures is not None:
        try:
            table = pipeline.read_measure_table(args.measures)
            covariates = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
            for path in pipeline.group_statistics(table, cfg.subject_dir / "stats", covariates):
                print(path)
        except NumericalError as exc:
            print(f"cortexkit: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 2
        except (CortexKitError, ValueError, OSError, KeyError) as exc:
            print(f"cortexkit: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
        return 0

    report = pipeline.run(cfg)
    for t in report.timings:
        log.info("%-10s %-3s %8.3f s", t.stage, t.hemi, t.seconds)
    if report.error:
        print(f"cortexkit: {report.error}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
