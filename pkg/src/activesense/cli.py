"""Command-line interface: validate, run, export, clean-cache."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from activesense import figures, harness
from activesense.config import ConfigError, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NOT_FOUND = 3


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", required=True, help="experiment config (YAML)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activesense",
        description="Active channel sensing experiments: adaptive beam and "
                    "RIS reflection alignment with classical baselines.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file and print its hash")
    _add_config_arg(p)

    p = sub.add_parser("run", help="run every (seed, sweep, method) cell")
    _add_config_arg(p)
    p.add_argument("-o", "--output-dir", help="override the config's output_dir")
    p.add_argument("--cache-dir", help="shared checkpoint cache directory")
    p.add_argument("--workers", type=int, default=1, help="parallel jobs (default 1)")
    p.add_argument("--seed-override", type=int,
                   help="run only this training seed instead of the config's list")

    p = sub.add_parser("export", help="write plot-ready CSV plus a rendered PNG")
    p.add_argument("kind", choices=figures.FIGURE_KINDS)
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--results", help="results.csv path (mse-vs-snr, gain-vs-t)")
    p.add_argument("-c", "--config", help="experiment config (beam-pattern, posterior-trace)")
    p.add_argument("--cache-dir", help="checkpoint cache directory")
    p.add_argument("--seed", type=int, default=None, help="training seed of the checkpoint")
    p.add_argument("--sweep-value", type=float, default=None)
    p.add_argument("--phi-deg", type=float, default=25.82, help="true AoA in degrees")
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--units", choices=("rad2", "deg2"), default="rad2",
                   help="MSE unit for the rendered plot")

    p = sub.add_parser("clean-cache", help="delete cached checkpoints and histories")
    _add_config_arg(p)
    p.add_argument("-o", "--output-dir")
    p.add_argument("--cache-dir")
    return parser


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"ok: {cfg.name} (hash {cfg.config_hash()})")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg.seeds = (args.seed_override,)
    table = harness.run_experiment(
        cfg, output_dir=args.output_dir, workers=args.workers, cache_dir=args.cache_dir
    )
    out = args.output_dir or cfg.output_dir
    print(f"wrote {len(table.rows)} result rows to {out}/results.csv")
    return EXIT_OK


def _cmd_export(args) -> int:
    if args.kind in ("mse-vs-snr", "gain-vs-t"):
        if not args.results:
            print("error: --results is required for this export", file=sys.stderr)
            return EXIT_CONFIG
        if args.kind == "mse-vs-snr":
            path = figures.export_mse_vs_snr(args.results, args.output_dir, units=args.units)
        else:
            path = figures.export_gain_vs_t(args.results, args.output_dir)
        print(f"wrote {path} (+ png)")
        return EXIT_OK
    if not args.config:
        print("error: --config is required for this export", file=sys.stderr)
        return EXIT_CONFIG
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    sweep_value = args.sweep_value if args.sweep_value is not None else cfg.sweep.values[0]
    phi = float(np.deg2rad(args.phi_deg))
    if args.kind == "beam-pattern":
        path = figures.export_beam_pattern(cfg, sweep_value, seed, phi,
                                           args.episode_seed, args.output_dir,
                                           cache_dir=args.cache_dir)
    else:
        path = figures.export_posterior_trace(cfg, sweep_value, seed, phi,
                                              args.episode_seed, args.output_dir,
                                              cache_dir=args.cache_dir)
    print(f"wrote {path} (+ png)")
    return EXIT_OK


def _cmd_clean_cache(args) -> int:
    cfg = load_config(args.config)
    removed = harness.clean_cache(cfg, output_dir=args.output_dir, cache_dir=args.cache_dir)
    print(f"removed {removed} cached file(s)")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "export":
            return _cmd_export(args)
        if args.command == "clean-cache":
            return _cmd_clean_cache(args)
        return EXIT_ERROR
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except Exception as exc:  # surface the category, keep the exit code stable
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
