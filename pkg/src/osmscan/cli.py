"""Command-line entry points: run, compare, build-prior, gen-scene."""

from __future__ import annotations

import argparse
import os
import sys

from .config import ExperimentConfig, apply_overrides, load_config, parse_strategy
from .osm_prior import build_prior, parse_dem, parse_osm
from .cloud import save_cloud
from .pipeline import compare_strategies, run_experiment
from .scene_sim import format_scene_files


def _add_run_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--strategy", help="static | constant:<omega> | adaptive")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--osm-dropout", type=float, help="footprint dropout fraction")
    p.add_argument("--out", help="output directory")
    p.add_argument("--frames", type=int, help="cap on simulated frames")
    p.add_argument("--scene", help="builtin scene name or scene file")


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "scene", None):
        from dataclasses import replace

        cfg = replace(cfg, scene=args.scene)
    return apply_overrides(
        cfg,
        strategy=args.strategy,
        seed=args.seed,
        osm_dropout=args.osm_dropout,
        out=args.out,
        frames=args.frames,
    )


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    result = run_experiment(cfg)
    print("strategy %s over %d frames" % (cfg.strategy, len(result.times)))
    print(
        "odometry   mean APE %.4f m  rmse xyz (%.4f, %.4f, %.4f)"
        % (result.ape_est.mean_ape, *result.ape_est.rmse_xyz)
    )
    print(
        "corrected  mean APE %.4f m  rmse xyz (%.4f, %.4f, %.4f)"
        % (result.ape_corrected.mean_ape, *result.ape_corrected.rmse_xyz)
    )
    if result.control_solves:
        print(
            "controller solves %d (degraded %d)"
            % (result.control_solves, result.degraded_solves)
        )
    if cfg.out:
        print("outputs in %s" % cfg.out)
    return 0


def _cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        parse_strategy(s)
    out = args.out or cfg.out or "comparison"
    results = compare_strategies(cfg, strategies, out)
    width = max(len(s) for s in strategies)
    print("%-*s  %10s  %8s %8s %8s" % (width, "strategy", "mean_ape", "rmse_x", "rmse_y", "rmse_z"))
    for spec in strategies:
        r = results[spec].ape_corrected
        print(
            "%-*s  %10.4f  %8.4f %8.4f %8.4f"
            % (width, spec, r.mean_ape, *r.rmse_xyz)
        )
    print("table written to %s" % os.path.join(out, "comparison.csv"))
    return 0


def _cmd_build_prior(args) -> int:
    with open(args.osm, "rb") as f:
        osm_bytes = f.read()
    origin = tuple(float(v) for v in args.origin.split(",")) if args.origin else (0.0, 0.0)
    parsed = parse_osm(osm_bytes, origin=origin)
    if parsed.skipped_ways:
        print("skipped %d unusable ways" % parsed.skipped_ways, file=sys.stderr)
    with open(args.dem) as f:
        dem = parse_dem(f.read())
    prior = build_prior(
        parsed.footprints, dem, args.facade_spacing, args.ground_spacing
    )
    save_cloud(args.out, prior)
    print("prior with %d points written to %s" % (len(prior), args.out))
    return 0


def _cmd_gen_scene(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    paths = format_scene_files(
        args.name, args.out, frame_rate=args.frame_rate,
        dropout=args.osm_dropout, seed=args.seed,
    )
    for p in paths:
        print(p)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="osmscan", description="adaptive scanning experiments on synthetic worlds"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one strategy and write its artifacts")
    _add_run_overrides(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run several strategies on the same world")
    _add_run_overrides(p_cmp)
    p_cmp.add_argument(
        "--strategies",
        default="static,constant:3,adaptive",
        help="comma-separated strategy list",
    )
    p_cmp.set_defaults(func=_cmd_compare)

    p_prior = sub.add_parser("build-prior", help="OSM + DEM to a prior cloud file")
    p_prior.add_argument("--osm", required=True, help="OSM XML file")
    p_prior.add_argument("--dem", required=True, help="ESRI ASCII grid file")
    p_prior.add_argument("--out", required=True, help="output cloud path")
    p_prior.add_argument("--facade-spacing", type=float, default=0.5)
    p_prior.add_argument("--ground-spacing", type=float, default=2.0)
    p_prior.add_argument("--origin", help="projection origin lat,lon (default 0,0)")
    p_prior.set_defaults(func=_cmd_build_prior)

    p_gen = sub.add_parser("gen-scene", help="write a builtin scene to files")
    p_gen.add_argument("--name", required=True, help="corridor | campus | open_square")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--frame-rate", type=float, default=10.0)
    p_gen.add_argument("--osm-dropout", type=float, default=0.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=_cmd_gen_scene)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
