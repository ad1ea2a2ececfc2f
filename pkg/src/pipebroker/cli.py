"""Command-line front end.

Five subcommands: ``predict`` evaluates the analytical model, ``microbench``
calibrates per-block write/read cost, ``bench-transport`` compares the file
and message paths, ``run`` executes one method end to end, and ``compare``
races all three. Reports emit as JSON or CSV with stable formatting (sorted
keys, 6 significant digits), so identical inputs give identical bytes.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
import tempfile
from pathlib import Path

from . import harness, microbench as mb, model, transport as tp
from .core import PipelineConfig, StageTimes, TransportKind
from .errors import InvalidConfigurationError, InvalidInputError, PipebrokerError

DATA_DIR_ENV = "PIPEBROKER_DATA_DIR"

_DURATION_RE = re.compile(r"^(\d+(?:\.\d+)?)(ns|us|ms|s)?$")
_SIZE_RE = re.compile(r"^(\d+)([KMG])?$", re.IGNORECASE)
_DURATION_SCALE = {"ns": 1e-9, "us": 1e-6, "ms": 1e-3, "s": 1.0, None: 1.0}
_SIZE_SCALE = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30, None: 1}


def parse_duration(text: str) -> float:
    """Duration with optional ns/us/ms/s suffix; bare numbers are seconds."""
    match = _DURATION_RE.match(text.strip())
    if not match:
        raise argparse.ArgumentTypeError(f"malformed duration {text!r}")
    value, suffix = match.groups()
    return float(value) * _DURATION_SCALE[suffix]


def parse_size(text: str) -> int:
    """Byte size with optional K/M/G suffix (powers of 1024)."""
    match = _SIZE_RE.match(text.strip())
    if not match:
        raise argparse.ArgumentTypeError(f"malformed size {text!r}")
    value, suffix = match.groups()
    return int(value) * _SIZE_SCALE[suffix.upper() if suffix else None]


def parse_size_list(text: str) -> list:
    """Comma-separated sizes; ``A..B`` expands by doubling from A up to B."""
    sizes = []
    for token in text.split(","):
        token = token.strip()
        if ".." in token:
            lo_text, hi_text = token.split("..", 1)
            lo, hi = parse_size(lo_text), parse_size(hi_text)
            if lo < 1 or hi < lo:
                raise argparse.ArgumentTypeError(f"bad size range {token!r}")
            current = lo
            while current <= hi:
                sizes.append(current)
                current *= 2
        else:
            sizes.append(parse_size(token))
    if not sizes:
        raise argparse.ArgumentTypeError("empty size list")
    return sizes


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return "" if value is None else str(value)


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def emit_report(json_obj: dict, csv_fields, csv_rows, fmt: str, path) -> None:
    """Write one report; identical inputs produce identical bytes."""
    if fmt == "json":
        text = json.dumps(_round_floats(json_obj), sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(csv_fields)
        for row in csv_rows:
            writer.writerow([_fmt(row.get(f)) for f in csv_fields])
        text = buf.getvalue()
    else:
        raise InvalidInputError(f"unknown report format {fmt!r}")
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _print_table(headers, rows) -> None:
    cells = [[_fmt(value) for value in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_output_flags(parser, formats=("json", "csv")) -> None:
    parser.add_argument("--format", choices=formats, default=None,
                        help="report format (default json, csv for sweeps)")
    parser.add_argument("--out", default=None, metavar="PATH",
                        help="write the report here instead of stdout")


def _add_config_flags(parser) -> None:
    parser.add_argument("--config", default=None, metavar="JSON",
                        help="JSON config file; explicit flags override it")
    parser.add_argument("--producers", type=int, default=None)
    parser.add_argument("--consumers", type=int, default=None)
    parser.add_argument("--total-data", type=parse_size, default=None,
                        help="dataset size, e.g. 64M")
    parser.add_argument("--block-size", type=parse_size, default=None,
                        help="block size, e.g. 64K")
    parser.add_argument("--transport", choices=[k.value for k in TransportKind],
                        default=None)
    parser.add_argument("--data-dir", default=None,
                        help=f"staging directory (default ${DATA_DIR_ENV})")
    parser.add_argument("--producer-ring-capacity", type=int, default=None)
    parser.add_argument("--consumer-ring-capacity", type=int, default=None)
    parser.add_argument("--prefetch-depth", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--iters", type=int, default=None,
                        help="analysis iterations (synthetic workload)")
    for stage in ("t-comp", "t-o", "t-i", "t-analy"):
        parser.add_argument(f"--{stage}", type=parse_duration, default=None,
                            help=f"per-block {stage.replace('-', '_')} "
                                 "(selects the sleep workload; all four required)")


def _build_config(args) -> PipelineConfig:
    obj = {}
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfigurationError(f"{args.config}: {exc}") from exc
        if not isinstance(obj, dict):
            raise InvalidConfigurationError(f"{args.config}: config must be an object")
    for key in ("producers", "consumers", "total_data", "block_size", "transport",
                "producer_ring_capacity", "consumer_ring_capacity",
                "prefetch_depth", "seed"):
        value = getattr(args, key)
        if value is not None:
            obj[key] = value
    if args.data_dir is not None:
        obj["data_dir"] = args.data_dir
    elif not obj.get("data_dir") and os.environ.get(DATA_DIR_ENV):
        obj["data_dir"] = os.environ[DATA_DIR_ENV]
    stage_flags = [args.t_comp, args.t_o, args.t_i, args.t_analy]
    given = [v for v in stage_flags if v is not None]
    if given and len(given) < 4:
        raise InvalidConfigurationError(
            "sleep workload needs all of --t-comp --t-o --t-i --t-analy")
    if given:
        obj["workload"] = {"kind": "sleep", "t_comp": args.t_comp, "t_o": args.t_o,
                           "t_i": args.t_i, "t_analy": args.t_analy}
    elif args.iters is not None:
        obj["workload"] = {"kind": "synthetic", "iters": args.iters}
    missing = [k for k in ("producers", "consumers", "total_data", "block_size")
               if k not in obj]
    if missing:
        raise InvalidConfigurationError(f"missing config values: {missing}")
    return PipelineConfig.from_dict(obj)


# ----------------------------------------------------------------- commands

def _cmd_predict(args) -> int:
    times = StageTimes(args.t_comp, args.t_o, args.t_i, args.t_analy)
    totals = model.stage_totals(times, args.blocks, args.producers, args.consumers)
    predictions = [model.predict_traditional(totals), model.predict_improved(totals),
                   model.predict_async(totals)]
    rows = [{"method": p.method, "t2s_seconds": p.t2s, "bottleneck": p.bottleneck}
            for p in predictions]
    if args.format is None and args.out is None:
        _print_table(("method", "t2s_seconds", "bottleneck"),
                     [(r["method"], r["t2s_seconds"], r["bottleneck"]) for r in rows])
        return 0
    json_obj = {
        "stage_times_seconds": times.as_dict(),
        "blocks": args.blocks,
        "producers": args.producers,
        "consumers": args.consumers,
        "stage_totals_seconds": totals.as_dict(),
        "predictions": rows,
    }
    emit_report(json_obj, ("method", "t2s_seconds", "bottleneck"), rows,
                args.format or "json", args.out)
    return 0


def _resolve_dir(path_arg, make_temp_prefix: str):
    """(directory, cleanup_handle); ${PIPEBROKER_DATA_DIR} then a temp dir."""
    if path_arg:
        return Path(path_arg), None
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env), None
    handle = tempfile.TemporaryDirectory(prefix=make_temp_prefix)
    return Path(handle.name), handle


def _cmd_microbench(args) -> int:
    sizes = args.block_sizes or [args.block_size]
    directory, cleanup = _resolve_dir(args.dir, "pipebroker-mb-")
    n = args.blocks_per_writer
    if args.mode in ("barrier", "both"):
        adjusted = mb.adjust_blocks(n, args.steps)
        if adjusted != n:
            print(f"warning: adjusted blocks-per-writer {n} -> {adjusted} "
                  f"(must be a multiple of --steps {args.steps})", file=sys.stderr)
            n = adjusted
    results = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for size in sizes:
            if args.mode in ("naive", "both"):
                results.append(mb.naive_microbench(
                    args.producers, args.consumers, n, size, directory,
                    sync=args.sync, seed=args.seed))
            if args.mode in ("barrier", "both"):
                results.append(mb.barrier_microbench(
                    args.producers, args.consumers, n, args.steps, size, directory,
                    sync=args.sync, seed=args.seed))
    finally:
        if cleanup is not None:
            cleanup.cleanup()
    rows = [r.as_dict() for r in results]
    fmt = args.format or ("csv" if len(rows) > 1 else "json")
    emit_report({"results": rows}, mb.CSV_FIELDS, rows, fmt, args.out)
    return 0


_BENCH_FIELDS = ("kind", "block_size", "blocks", "per_block_time_seconds",
                 "total_time_seconds")


def _cmd_bench_transport(args) -> int:
    sizes = args.block_sizes or [args.block_size]
    kinds = []
    if args.transport in ("channel", "both"):
        kinds.append(TransportKind.CHANNEL)
    if args.transport == "tcp":
        kinds.append(TransportKind.TCP)
    if args.transport in ("file", "both"):
        kinds.append(TransportKind.FILE)
    needs_dir = TransportKind.FILE in kinds
    directory, cleanup = _resolve_dir(args.dir, "pipebroker-bench-") \
        if needs_dir else (None, None)
    rows = []
    ratios = []
    try:
        if needs_dir:
            directory.mkdir(parents=True, exist_ok=True)
        for size in sizes:
            by_kind = {}
            for kind in kinds:
                if kind == TransportKind.FILE:
                    m = tp.bench_file_transfer(args.blocks, size, directory,
                                               sync=args.sync, seed=args.seed)
                else:
                    m = tp.bench_message_transfer(args.blocks, size, kind,
                                                  seed=args.seed)
                by_kind[kind] = m
                rows.append({"kind": m.kind.value, "block_size": m.block_size,
                             "blocks": m.blocks,
                             "per_block_time_seconds": m.per_block_time,
                             "total_time_seconds": m.total_time})
            if TransportKind.FILE in by_kind and TransportKind.CHANNEL in by_kind:
                ratios.append({"block_size": size,
                               "file_over_channel": tp.transfer_ratio(
                                   by_kind[TransportKind.FILE],
                                   by_kind[TransportKind.CHANNEL])})
    finally:
        if cleanup is not None:
            cleanup.cleanup()
    json_obj = {"measurements": rows}
    if ratios:
        json_obj["ratios"] = ratios
    fmt = args.format or ("csv" if len(rows) > 1 else "json")
    emit_report(json_obj, _BENCH_FIELDS, rows, fmt, args.out)
    return 0


_RUN_FIELDS = ("method", "blocks", "measured_t2s", "predicted_t2s",
               "model_relative_error", "bottleneck", "compute_seconds",
               "output_seconds", "input_seconds", "analysis_seconds",
               "analysis_total", "delivered", "speedup_vs_traditional")


def _run_row(report, speedup=None) -> dict:
    return {
        "method": report.method,
        "blocks": report.blocks,
        "measured_t2s": report.measured_t2s,
        "predicted_t2s": report.predicted_t2s,
        "model_relative_error": report.model_relative_error,
        "bottleneck": report.bottleneck,
        "compute_seconds": report.stage_seconds["compute"],
        "output_seconds": report.stage_seconds["output"],
        "input_seconds": report.stage_seconds["input"],
        "analysis_seconds": report.stage_seconds["analysis"],
        "analysis_total": report.analysis_total,
        "delivered": report.delivered,
        "speedup_vs_traditional": speedup,
    }


def _cmd_run(args) -> int:
    config = _build_config(args)
    report = harness.run_method(args.method, config)
    if args.events:
        report.log.write_jsonl(args.events)
        report.log_path = args.events
    emit_report(report.as_dict(), _RUN_FIELDS, [_run_row(report)],
                args.format or "json", args.out)
    return 0


def _cmd_compare(args) -> int:
    config = _build_config(args)
    comparison = harness.compare_methods(config)
    t_trad = comparison.traditional.measured_t2s
    rows = [_run_row(r, speedup=(t_trad / r.measured_t2s if r.measured_t2s > 0
                                 else float("inf")))
            for r in (comparison.traditional, comparison.improved,
                      comparison.asynchronous)]
    emit_report(comparison.as_dict(), _RUN_FIELDS, rows,
                args.format or "json", args.out)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> _Parser:
    parser = _Parser(prog="pipebroker",
                     description="Staged data pipeline: model, calibrate, run.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("predict", help="evaluate the analytical model")
    for stage in ("t-comp", "t-o", "t-i", "t-analy"):
        p.add_argument(f"--{stage}", type=parse_duration, required=True)
    p.add_argument("--blocks", type=int, required=True, help="total block count")
    p.add_argument("--producers", type=int, required=True)
    p.add_argument("--consumers", type=int, required=True)
    _add_output_flags(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("microbench", help="calibrate per-block write/read cost")
    p.add_argument("--mode", choices=("naive", "barrier", "both"), default="both")
    p.add_argument("--producers", type=int, default=2)
    p.add_argument("--consumers", type=int, default=2)
    p.add_argument("--blocks-per-writer", type=int, default=16)
    p.add_argument("--steps", type=int, default=4, help="barrier step count")
    p.add_argument("--block-size", type=parse_size, default=64 * 1024)
    p.add_argument("--block-sizes", type=parse_size_list, default=None,
                   metavar="LIST", help="sweep, e.g. 64K..1M or 128K,256K")
    p.add_argument("--dir", default=None, help=f"directory (default ${DATA_DIR_ENV} "
                                               "or a temp dir)")
    p.add_argument("--sync", action="store_true",
                   help="request durability per block")
    p.add_argument("--seed", type=int, default=1)
    _add_output_flags(p)
    p.set_defaults(func=_cmd_microbench)

    p = sub.add_parser("bench-transport",
                       help="per-block cost of file staging vs messages")
    p.add_argument("--transport", choices=("channel", "tcp", "file", "both"),
                   default="both")
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--block-size", type=parse_size, default=64 * 1024)
    p.add_argument("--block-sizes", type=parse_size_list, default=None,
                   metavar="LIST")
    p.add_argument("--dir", default=None)
    p.add_argument("--sync", dest="sync", action="store_true", default=True)
    p.add_argument("--no-sync", dest="sync", action="store_false")
    p.add_argument("--seed", type=int, default=1)
    _add_output_flags(p)
    p.set_defaults(func=_cmd_bench_transport)

    p = sub.add_parser("run", help="run one method end to end")
    p.add_argument("--method", choices=model.METHODS, required=True)
    _add_config_flags(p)
    p.add_argument("--events", default=None, metavar="PATH",
                   help="write the per-block event log (JSON lines) here")
    _add_output_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="race all three methods on one config")
    _add_config_flags(p)
    _add_output_flags(p)
    p.set_defaults(func=_cmd_compare)

    return parser


def parse_and_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InvalidConfigurationError, InvalidInputError) as exc:
        print(f"pipebroker: error: {exc}", file=sys.stderr)
        return 1
    except (PipebrokerError, OSError) as exc:
        print(f"pipebroker: runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
