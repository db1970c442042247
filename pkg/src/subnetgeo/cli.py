"""Command line: ``subnetgeo {generate,run,plot,check}``.

Exit codes: 0 ok, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import load_run_config, parse_metrics
from .core import ConfigError, DataError, RejectionTally, parse_clusters
from .geodesy import PolygonError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("subnetgeo")


def _cmd_generate(args) -> int:
    from .synthgen import InfeasibleParameters, generate, load_generator_config

    if not args.config:
        raise ConfigError("generate needs --config")
    try:
        doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    try:
        cfg = load_generator_config(doc)
        paths = generate(cfg, seed, args.out)
    except (InfeasibleParameters, TypeError, KeyError) as exc:
        raise ConfigError(f"generator config: {exc}") from None
    print(f"wrote {paths.clusters.parent} (run config: {paths.run_config.name})")
    return EXIT_OK


def _cmd_run(args) -> int:
    from .pipeline import run

    if not args.config:
        raise ConfigError("run needs --config")
    cfg = load_run_config(args.config)
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    metrics = parse_metrics(args.metrics) if args.metrics else cfg.metrics
    res = run(cfg, out, threads=args.threads, metrics=metrics)
    rows = res.summary["rows"]
    print(f"{rows['accepted']}/{rows['total']} rows accepted; report in {res.out_dir}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plot import plot

    target = args.report or args.out
    if not target or not Path(target).is_dir():
        raise ConfigError(f"report directory not found: {target}")
    written, notices = plot(target, args.plots)
    for n in notices:
        print(f"notice: {n}", file=sys.stderr)
    for p in written:
        print(p)
    return EXIT_OK


def _cmd_check(args) -> int:
    from .enrichment import Registry, RuleTable, load_geodb
    from .geodesy import load_polygon_layer

    if not args.config:
        raise ConfigError("check needs --config")
    cfg = load_run_config(args.config)
    with open(cfg.clusters, newline="", encoding="utf-8") as fh:
        _, tally = parse_clusters(fh, cfg.policy)
    Registry.load(cfg.registry)
    if cfg.rules:
        RuleTable.load(cfg.rules)
    for s in cfg.snapshots:
        load_geodb(s.path, s.provider, s.valid_from, s.valid_to)
    if cfg.polygons:
        load_polygon_layer(cfg.polygons.path, cfg.polygons.geographic)
    print(json.dumps(tally.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subnetgeo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate", help="write a synthetic dataset with ground-truth sidecar")
    common(g)
    g.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("run", help="run the evaluation pipeline")
    common(r)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--metrics", help="comma-separated subset of metrics")
    r.add_argument("--seed", type=int, default=None, help="accepted for symmetry; the pipeline is deterministic")

    pl = sub.add_parser("plot", help="render SVG charts from a report directory")
    pl.add_argument("report", nargs="?", help="report directory")
    pl.add_argument("--out", help="report directory (alternative to the positional)")
    pl.add_argument("--plots", help="where to write SVGs (default: <report>/plots)")

    c = sub.add_parser("check", help="validate config and inputs only")
    common(c)
    return p


COMMANDS = {"generate": _cmd_generate, "run": _cmd_run, "plot": _cmd_plot, "check": _cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PolygonError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
