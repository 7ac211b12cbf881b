"""Command line entry point.

One subcommand per pipeline stage plus batch decoding, ablation comparison,
and report printing. Stage commands run a single stage against existing
upstream artifacts; pass --deps to build missing prerequisites first.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data or
protocol error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import (
    ABLATION_PRESETS,
    apply_overrides,
    build_run_config,
    load_config_file,
)
from .errors import (
    ConfigError,
    DataError,
    DecodeError,
    ProtocolError,
    SemrecError,
)
from .pipeline import Pipeline, run_ablation

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

STAGE_COMMANDS = {
    "ingest": "dataset",
    "synth": "dataset",
    "embed": "embed",
    "tokenize": "tokenize",
    "assign": "assign",
    "train": "train",
    "finetune": "finetune",
    "evaluate": "evaluate",
    "analyze": "analyze",
}


def _common_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or YAML config file")
    parser.add_argument("--seed", type=int, help="override run seed")
    parser.add_argument("--out", help="override output root directory")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field by dotted path, e.g. quantizer.levels=3",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semrec",
        description="Cross-domain generative recommendation over semantic identifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    stage_help = {
        "ingest": "build the dataset stage from per-domain metadata/interaction files",
        "synth": "build the dataset stage from the synthetic generator",
        "embed": "embed item texts into vectors",
        "tokenize": "train the residual quantizer(s) on item embeddings",
        "assign": "assign unique semantic identifiers to all items",
        "train": "train the sequence-to-sequence recommender",
        "finetune": "fit per-domain adapters on top of the unified recommender",
        "evaluate": "decode test histories and write metric reports",
        "analyze": "analyze code usage purity and embedding-neighbor code overlap",
    }
    for command in STAGE_COMMANDS:
        p = sub.add_parser(command, help=stage_help[command])
        _common_options(p)
        p.add_argument(
            "--deps",
            action="store_true",
            help="build missing upstream stages instead of failing",
        )

    p = sub.add_parser("decode", help="rank items for histories given as JSONL")
    _common_options(p)
    p.add_argument("--input", required=True, help="JSONL with domain and history fields")
    p.add_argument("--output", required=True, help="where to write ranked JSONL")
    p.add_argument("--deps", action="store_true", help="build missing upstream stages")

    p = sub.add_parser("ablate", help="run default and one variant, compare reports")
    _common_options(p)
    p.add_argument(
        "--preset",
        required=True,
        choices=sorted(ABLATION_PRESETS),
        help="which component to disable or swap",
    )

    p = sub.add_parser("report", help="print the metric table of the evaluate stage")
    _common_options(p)
    return parser


def _load_data(args: argparse.Namespace) -> dict:
    data = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    return apply_overrides(data, args.overrides)


def run(args: argparse.Namespace) -> int:
    data = _load_data(args)

    if args.command == "ablate":
        comparison = run_ablation(data, args.preset)
        agg = {m: f"{v:+.2%}" for m, v in comparison["relative_change"].items()}
        print(f"variant {args.preset} vs default (relative aggregate change): {agg}")
        return EXIT_OK

    config = build_run_config(data)
    pipe = Pipeline(config)

    if args.command == "report":
        if not pipe.stage_complete("evaluate"):
            raise DataError("no evaluate artifacts for this config; run evaluate first")
        from .evaluation import MetricReport
        from .utils import read_json

        report = MetricReport.from_json(read_json(pipe.stage_dir("evaluate") / "report.json"))
        print(report.render_table())
        return EXIT_OK

    if args.command == "decode":
        n = pipe.decode_file(args.input, args.output, deps=args.deps)
        print(f"wrote {n} ranked lists to {args.output}")
        return EXIT_OK

    if args.command == "ingest" and config.dataset.source != "files":
        raise ConfigError("ingest requires dataset.source=files (use synth otherwise)")
    if args.command == "synth" and config.dataset.source != "synthetic":
        raise ConfigError("synth requires dataset.source=synthetic (use ingest otherwise)")

    stage = STAGE_COMMANDS[args.command]
    sdir = pipe.ensure_stage(stage, deps=args.deps)
    print(f"stage {stage} ready at {sdir}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProtocolError, DecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SemrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
