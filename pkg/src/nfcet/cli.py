"""Command-line front end.

Subcommands:
  estimate     one channel-estimation frame on a synthetic scene
  track        estimation frame plus tracking frames on an evolving scene
  sweep-snr    mean NMSE versus SNR, paired across algorithms
  sweep-pilots tracking NMSE versus the tracking-phase pilot count
  selftest     fast oracle battery (closed forms, brute force, FD checks)
  complexity   per-iteration operation counts next to the symbolic cost

Every output file starts with a `# config-hash:` comment so results can
be tied back to the exact configuration that produced them.
"""

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, load_config
from .grids import build_grids
from .pipeline import (
    complexity_report,
    make_scene,
    run_ce_frame,
    run_tracking,
    sweep_pilots,
    sweep_snr,
    tnmse,
)


def _load(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "trials", None):
        cfg.sweep["trials"] = args.trials
    os.makedirs(args.out, exist_ok=True)
    return cfg, build_grids(cfg.scenario, **cfg.grids)


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _write_csv(path, cfg, header, rows):
    with open(path, "w") as fh:
        fh.write(f"# config-hash: {cfg.config_hash()}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(row[h]) for h in header) + "\n")


def _write_trace(path, cfg, pairs):
    """Two-column text table: index then value."""
    with open(path, "w") as fh:
        fh.write(f"# config-hash: {cfg.config_hash()}\n")
        for a, b in pairs:
            fh.write(f"{a} {b}\n")


def _nmse_db(value):
    return 10.0 * np.log10(max(value, 1e-300))


def cmd_estimate(args):
    cfg, grids = _load(args)
    scen = cfg.scenario
    truth = make_scene(scen, args.seed, snr_db=cfg.sweep["snr_db"])
    res = run_ce_frame(truth, scen, grids, args.seed, cfg.priors, cfg.sched,
                       max_paths=cfg.stage1["max_paths"],
                       n_turbo=cfg.stage2_extra["n_turbo"],
                       turbo_tol=cfg.stage2_extra["turbo_tol"],
                       algo=args.algo,
                       refine_iters=cfg.stage1["refine_iters"],
                       n_init=cfg.stage1["n_init"])
    _write_csv(os.path.join(args.out, "estimate.csv"), cfg,
               ["snr_db", "algo", "nmse_db", "stderr_db", "trials"],
               [{"snr_db": cfg.sweep["snr_db"], "algo": args.algo,
                 "nmse_db": _nmse_db(res.nmse), "stderr_db": 0.0,
                 "trials": 1}])
    if "stage1_residuals" in res.traces:
        _write_trace(os.path.join(args.out, "stage1_residuals.txt"), cfg,
                     list(enumerate(res.traces["stage1_residuals"])))
    if res.traces.get("kl"):
        _write_trace(os.path.join(args.out, "refinement_objective.txt"), cfg,
                     list(enumerate(res.traces["kl"])))
    _say(args, f"estimate: {args.algo} NMSE {_nmse_db(res.nmse):.2f} dB "
               f"({res.estimate.n_paths} paths, "
               f"{res.traces.get('wall_time', 0.0):.1f} s)")
    return 0


def cmd_track(args):
    cfg, grids = _load(args)
    results = run_tracking(cfg.scenario, grids, args.seed,
                           cfg.sweep["t_frames"], cfg.priors, cfg.sched,
                           snr_db=cfg.sweep["snr_db"],
                           max_paths=cfg.stage1["max_paths"],
                           n_turbo=cfg.stage2_extra["n_turbo"])
    nmses = [r.nmse for r in results]
    rows = [{"frame": t, "algo": args.algo, "nmse_db": _nmse_db(v),
             "stderr_db": 0.0, "trials": 1}
            for t, v in enumerate(nmses)]
    _write_csv(os.path.join(args.out, "track.csv"), cfg,
               ["frame", "algo", "nmse_db", "stderr_db", "trials"], rows)
    _write_trace(os.path.join(args.out, "track_nmse.txt"), cfg,
                 [(t, _nmse_db(v)) for t, v in enumerate(nmses)])
    _say(args, f"track: TNMSE {_nmse_db(tnmse(nmses)):.2f} dB over "
               f"{len(nmses)} frames")
    return 0


def cmd_sweep_snr(args):
    cfg, grids = _load(args)
    algos = (args.algo, "omp") if args.algo != "omp" else ("omp",)
    rows = sweep_snr(cfg.scenario, grids, cfg.sweep["snr_list"],
                     cfg.sweep["trials"], algos=algos, seed=args.seed,
                     max_paths=cfg.stage1["max_paths"],
                     n_turbo=cfg.stage2_extra["n_turbo"])
    _write_csv(os.path.join(args.out, "sweep_snr.csv"), cfg,
               ["snr_db", "algo", "nmse_db", "stderr_db", "trials"], rows)
    for row in rows:
        _say(args, f"snr {row['snr_db']:6.1f} dB  {row['algo']:>6}  "
                   f"{row['nmse_db']:8.2f} dB  (+/- {row['stderr_db']:.2f})")
    return 0


def cmd_sweep_pilots(args):
    cfg, grids = _load(args)
    rows = sweep_pilots(cfg.scenario, grids, cfg.sweep["p2_list"],
                        cfg.sweep["trials"], t_frames=cfg.sweep["t_frames"],
                        seed=args.seed, snr_db=cfg.sweep["snr_db"],
                        max_paths=cfg.stage1["max_paths"])
    _write_csv(os.path.join(args.out, "sweep_pilots.csv"), cfg,
               ["p2", "algo", "tnmse_db", "stderr_db", "trials"], rows)
    for row in rows:
        _say(args, f"pilots {row['p2']:3d}  {row['algo']:>6}  "
                   f"{row['tnmse_db']:8.2f} dB  (+/- {row['stderr_db']:.2f})")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    failures = run_selftest(quiet=args.quiet)
    if failures:
        print(f"{failures} check(s) failed")
    elif not args.quiet:
        print("all checks passed")
    return 1 if failures else 0


def cmd_complexity(args):
    cfg, grids = _load(args)
    scen = cfg.scenario
    truth = make_scene(scen, args.seed, snr_db=cfg.sweep["snr_db"])
    res = run_ce_frame(truth, scen, grids, args.seed, cfg.priors, cfg.sched,
                       max_paths=cfg.stage1["max_paths"],
                       n_turbo=cfg.stage2_extra["n_turbo"],
                       n_pilots=min(scen.p1, 8),
                       n_init=cfg.stage1["n_init"])
    report = complexity_report(res.traces.get("counters", []),
                               cfg.stage1["max_paths"], cfg.sched)
    path = os.path.join(args.out, "complexity.txt")
    with open(path, "w") as fh:
        fh.write(f"# config-hash: {cfg.config_hash()}\n")
        fh.write(report + "\n")
    _say(args, report)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nfcet",
        description="near-field cascaded channel estimation and tracking")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "estimate": cmd_estimate,
        "track": cmd_track,
        "sweep-snr": cmd_sweep_snr,
        "sweep-pilots": cmd_sweep_pilots,
        "selftest": cmd_selftest,
        "complexity": cmd_complexity,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI configuration")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--algo", choices=("tscet", "omp", "tompss"),
                       default="tscet")
        p.add_argument("--trials", type=int, default=None,
                       help="override the configured trial count")
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
