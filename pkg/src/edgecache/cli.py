"""Command-line driver: ``edgecache {storage-sweep,backhaul-sweep,density-sweep,stats,synth}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import experiments
from .config import CONFIG_KEYS, ConfigError, ExperimentConfig, apply_overrides, load_config
from .trace import assign_requests_to_cells, trace_stats, write_final_traces

log = logging.getLogger("edgecache")


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], type=_key_value,
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--trace", help="final-traces file (FRAME-TIME,HTTP-URI,SIZE)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    sweep = argparse.ArgumentParser(add_help=False, parents=[common])
    sweep.add_argument("-o", "--output-dir")
    sweep.add_argument("--repeats", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--header", action="store_true", help="write a header line in each CSV")

    parser = argparse.ArgumentParser(
        prog="edgecache",
        description="Proactive edge caching simulator.",
        epilog="config keys: " + ", ".join(CONFIG_KEYS),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("storage-sweep", parents=[sweep], help="satisfaction and backhaul load vs storage")
    sub.add_parser("backhaul-sweep", parents=[sweep], help="satisfaction vs backhaul/wireless capacity ratio")
    sub.add_parser("density-sweep", parents=[sweep], help="satisfaction RMSE vs CF training density")
    stats = sub.add_parser("stats", parents=[common], help="trace statistics")
    stats.add_argument("--csv", action="store_true", help="print a CSV header and row instead")
    synth = sub.add_parser("synth", parents=[common], help="write a synthetic final-traces file")
    synth.add_argument("-o", "--output", help="output path (default: stdout)")
    synth.add_argument("--header", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    pairs = dict(args.overrides)
    for flag, key in (("trace", "trace_file"), ("seed", "seed"), ("output_dir", "output_dir"),
                      ("repeats", "repeats"), ("workers", "workers")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = str(value)
    if getattr(args, "header", False) and args.command.endswith("-sweep"):
        pairs["csv_header"] = "true"
    return apply_overrides(config, pairs) if pairs else config


def _write_curves(curves, config: ExperimentConfig) -> None:
    for curve in curves:
        for path in experiments.emit_csv(curve, config.output_dir, config.csv_header):
            print(path)


def cmd_storage(config):
    _write_curves(experiments.run_storage_sweep(config), config)


def cmd_backhaul(config):
    _write_curves([experiments.run_backhaul_ratio_sweep(config)], config)


def cmd_density(config):
    _write_curves([experiments.run_density_sweep(config)], config)


def cmd_stats(config, args):
    catalog, requests = experiments.load_trace(config)
    requests = assign_requests_to_cells(
        requests, config.num_cells, experiments.child_seed(config.seed, 0, "assign")
    )
    stats = trace_stats(catalog, requests, config.num_cells)
    if args.csv:
        print(stats.csv_header())
        print(stats.to_csv_row())
    else:
        sys.stdout.write(stats.to_keyvalue())


def cmd_synth(config, args):
    params = dataclasses.replace(config.synthetic, seed=experiments.child_seed(config.seed, 0, "trace"))
    catalog, requests = experiments.generate_synthetic_trace(params)
    if args.output:
        try:
            with open(args.output, "w", encoding="utf-8", newline="") as fh:
                write_final_traces(catalog, requests, fh, args.header)
        except OSError as exc:
            raise OSError(f"cannot write {args.output}: {exc}") from exc
        log.info("wrote %d requests over %d contents to %s", len(requests), len(catalog), args.output)
    else:
        write_final_traces(catalog, requests, sys.stdout, args.header)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = resolve_config(args)
        if args.command == "storage-sweep":
            cmd_storage(config)
        elif args.command == "backhaul-sweep":
            cmd_backhaul(config)
        elif args.command == "density-sweep":
            cmd_density(config)
        elif args.command == "stats":
            cmd_stats(config, args)
        elif args.command == "synth":
            cmd_synth(config, args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"edgecache: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
