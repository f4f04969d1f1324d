"""Command-line front end: gen-world / map / localize / eval / recall-study."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import map_store
from .config import RunConfig, config_digest, load_run_config
from .metrics import RunReport, ate, load_trajectory, nees, save_trajectory, write_report
from .pipeline import run_localization, run_mapping, run_recall_study
from .sim import RouteSpec, default_route, route_from_json
from .world import WorldModel, generate_world, load_world, save_world


def _load_route(args, world: WorldModel, cfg: RunConfig) -> RouteSpec:
    if getattr(args, "route", None):
        return route_from_json(Path(args.route), cfg.sim)
    return default_route(world, cfg.sim)


def _cmd_gen_world(args) -> int:
    world = generate_world(Path(args.spec) if args.spec else None, seed=args.seed)
    save_world(world, args.out)
    return 0


def _cmd_map(args) -> int:
    cfg = load_run_config(args.noise)
    world = load_world(args.world)
    route = _load_route(args, world, cfg)
    res = run_mapping(world, route, cfg)
    nbytes = map_store.save(res.gmap, args.out, digest=config_digest(cfg))
    if args.traj:
        save_trajectory(res.est, args.traj)
    if args.gt_traj:
        save_trajectory(res.gt, args.gt_traj)
    if args.report:
        write_report(RunReport(
            rmse=res.ate_est[0], max_err=res.ate_est[1],
            nees=nees(res.ate_est[0], res.gt.length()),
            map_bytes=nbytes,
            timing={"frames": res.frames, "sim_seconds": res.sim_seconds},
        ), args.report)
    return 0


def _cmd_localize(args) -> int:
    cfg = load_run_config(args.noise)
    world = load_world(args.world)
    route = _load_route(args, world, cfg)
    gmap = map_store.load(args.map)
    res = run_localization(world, route, gmap, cfg)
    if args.traj:
        save_trajectory(res.est, args.traj)
    if args.gt_traj:
        save_trajectory(res.gt, args.gt_traj)
    if args.report:
        write_report(RunReport(
            rmse=res.ate_est[0], max_err=res.ate_est[1], nees=res.nees,
            recall=res.recall,
            loc_err_mean=res.loc_err[0], loc_err_max=res.loc_err[1],
            map_bytes=Path(args.map).stat().st_size,
            timing={"frames": res.frames, "sim_seconds": res.sim_seconds},
        ), args.report)
    return 0


def _cmd_eval(args) -> int:
    est = load_trajectory(args.est)
    gt = load_trajectory(args.gt)
    rmse, mx = ate(est, gt)
    write_report(RunReport(rmse=rmse, max_err=mx, nees=nees(rmse, gt.length())),
                 args.report)
    return 0


def _cmd_recall_study(args) -> int:
    cfg = load_run_config(args.noise)
    world = load_world(args.world)
    route = _load_route(args, world, cfg)
    gmap = map_store.load(args.map)
    drops = [float(tok) for tok in args.drop_sweep.split(",") if tok.strip()]
    if not drops:
        raise ValueError("empty --drop-sweep")
    sweep = run_recall_study(world, route, gmap, cfg, drops)
    write_report({"sweep": sweep}, args.report)
    return 0


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="parkslam",
                                  description="semantic parking-lot SLAM testbed")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic lot")
    p.add_argument("--spec", default=None, help="world spec JSON (defaults to the standard lot)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_world)

    p = sub.add_parser("map", help="drive the route and build a map")
    p.add_argument("--world", required=True)
    p.add_argument("--route", default=None, help="route JSON (defaults to the world's loop)")
    p.add_argument("--noise", default=None, help="run config JSON")
    p.add_argument("--out", required=True, help="output map file")
    p.add_argument("--traj", default=None, help="optimized trajectory CSV")
    p.add_argument("--gt-traj", default=None, help="ground-truth trajectory CSV")
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("localize", help="relocalize a second drive against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--route", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--traj", default=None, help="estimated trajectory CSV")
    p.add_argument("--gt-traj", default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("eval", help="compare two trajectory CSVs")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("recall-study", help="localization recall vs feature dropout")
    p.add_argument("--map", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--route", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--drop-sweep", required=True, help="comma list, e.g. 0,0.2,0.4")
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_recall_study)
    return top


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"parkslam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
