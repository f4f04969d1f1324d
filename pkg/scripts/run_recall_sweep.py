#!/usr/bin/env python3
"""Localization recall vs feature dropout on the standard lot.

Builds the prior map once (clean odometry, the surveyed-map setting),
then localizes a second drive at each dropout level. Dropout stands in
for appearance change: whole features missing because cars park on
them. Usage:

    python scripts/run_recall_sweep.py --drops 0,0.2,0.4 [--report out.json]
"""
import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from parkslam.config import OdomNoise, RunConfig
from parkslam.pipeline import run_mapping, run_recall_study
from parkslam.sim import default_route
from parkslam.world import generate_world


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--drops", default="0,0.2,0.4")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--spec", default=str(Path(__file__).resolve().parent.parent
                                          / "configs" / "world_lot.json"))
    ap.add_argument("--report", default=None)
    args = ap.parse_args()

    drops = [float(tok) for tok in args.drops.split(",") if tok.strip()]
    cfg = RunConfig(seed=args.seed)
    cfg = dataclasses.replace(
        cfg,
        noise=dataclasses.replace(cfg.noise, seed=args.seed + 1),
        odom=dataclasses.replace(cfg.odom, seed=args.seed + 2),
    )
    world = generate_world(args.spec)
    route = default_route(world, cfg.sim)

    t0 = time.time()
    map_cfg = dataclasses.replace(cfg, odom=OdomNoise(0.0, 0.0, 0.0, cfg.odom.seed))
    mres = run_mapping(world, route, map_cfg, detect_parking=False)
    print(f"map: {len(mres.gmap.cloud)} points, {mres.loop_edges} loop edges, "
          f"{time.time() - t0:.1f} s")

    rows = run_recall_study(world, route, mres.gmap, cfg, drops)
    for r in rows:
        print(f"p_drop {r['p_drop']:.2f}: recall {r['recall']:6.2f} %  "
              f"err mean {r['loc_err_mean']:5.2f} cm  "
              f"max {r['loc_err_max']:5.2f} cm  ({r['frames']} frames)")
    print(f"total {time.time() - t0:.1f} s")
    if args.report:
        Path(args.report).write_text(json.dumps({"sweep": rows}, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
