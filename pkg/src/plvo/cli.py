"""Command line: ``run``, ``eval`` and ``scene gen``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .evaluation import emit_report, evaluate_ate, load_tum
from .pipeline import run_pipeline
from .synthetic import generate_scene, save_scene


def _load(path):
    return load_config(path) if path else RunConfig()


def cmd_run(args):
    cfg = _load(args.config).with_overrides(seed=args.seed,
                                            use_lines=False if args.no_lines else None)
    result = run_pipeline(cfg, args.output)
    m = result.metrics()
    ate = "n/a" if m["ate_rmse_m"] is None else f"{m['ate_rmse_m']:.6g} m"
    print(f"frames {m['frames']}  keyframes {m['keyframes']}  "
          f"failures {len(m['tracking_failures'])}  ATE {ate}")
    return 0


def cmd_eval(args):
    res = evaluate_ate(load_tum(args.est), load_tum(args.gt))
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["ate_rmse_m", f"{res.rmse:.12g}"])
        w.writerow(["pairs", len(res.errors)])
    emit_report(res, out.parent, prefix=out.stem + "_")
    print(f"ATE RMSE {res.rmse:.6g} m over {len(res.errors)} poses")
    return 0


def cmd_scene_gen(args):
    cfg = _load(args.config)
    save_scene(generate_scene(cfg.scene, cfg.seed), args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="plvo", description="Stereo point-line visual odometry")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run odometry and write trajectory, map and metrics")
    r.add_argument("--config", help="TOML run configuration (defaults if omitted)")
    r.add_argument("--output", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--no-lines", action="store_true", help="point-only variant")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="absolute trajectory error between two TUM files")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="summary CSV; per-frame files go beside it")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("scene", help="synthetic scenes")
    ssub = s.add_subparsers(dest="scene_command", required=True)
    g = ssub.add_parser("gen", help="generate a scene file from a config")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_scene_gen)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"plvo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
