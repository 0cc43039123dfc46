"""Command-line entry point.

Exit codes: 0 on success, 1 on usage or input errors, 2 on a simulation
or training fault (collision, non-finite gradient).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from wavesmooth.core import ConfigError, config_hash, dump_config, load_config
from wavesmooth.dynamics import CollisionError
from wavesmooth.rl.ppo import TrainingFault

CONFIG_ENV = "WAVESMOOTH_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2

log = logging.getLogger("wavesmooth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for faults here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=os.environ.get(CONFIG_ENV),
                   help=f"YAML config file (default: ${CONFIG_ENV}, else built-in defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. idm.T=1.2; repeatable")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: from the config or run spec)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging; repeat for debug")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="wavesmooth", description="Mixed-autonomy wave-smoothing simulator and trainer.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="run one simulation spec")
    p.add_argument("--spec", required=True, help="YAML run spec")
    p.add_argument("--no-planner", action="store_true", help="disable the speed planner for this run")

    p = sub.add_parser("evaluate", parents=[common], help="run a grid of specs against all-human baselines")
    p.add_argument("--grid", required=True, help="YAML grid file")
    p.add_argument("--jobs", type=int, default=1, help="concurrent simulations (default: 1)")

    p = sub.add_parser("train", parents=[common], help="train a policy with PPO")
    p.add_argument("--iterations", type=int, default=None, help="override train.iterations")
    p.add_argument("--strict-deterministic", action="store_true",
                   help="write wall-clock times to timing.csv so train_log.csv is reproducible byte for byte")
    p.add_argument("--no-planner", action="store_true", help="train without the speed planner")

    p = sub.add_parser("stability", parents=[common], help="report the IDM string-stability margin")
    p.add_argument("--speeds", type=float, nargs="+", default=[5.0, 10.0, 14.0, 18.0, 22.0, 25.0, 30.0],
                   help="equilibrium speeds in m/s (default: 5 10 14 18 22 25 30)")

    sub.add_parser("gen-data", parents=[common], help="write the synthetic trajectory set")

    p = sub.add_parser("export-tsd", parents=[common], help="simulate a spec and export time-space and gap traces")
    p.add_argument("--spec", required=True, help="YAML run spec")
    p.add_argument("--stride", type=int, default=1, help="record every n-th step (default: 1)")
    return parser


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING - 10 * min(verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load(args):
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _spec(args, cfg, **extra):
    from wavesmooth.sim import load_spec
    spec = load_spec(args.spec)
    changes = dict(extra)
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "no_planner", False):
        changes["planner_enabled"] = False
    return replace(spec, **changes) if changes else spec


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    from wavesmooth.sim import metrics_row, run_episode, write_metrics
    from wavesmooth.energy import mpg_improvement
    cfg = _load(args)
    spec = _spec(args, cfg, record_tsd=False)
    h = config_hash(cfg)
    out = _out(args)
    res = run_episode(spec, cfg)
    m = res.metrics
    base = run_episode(spec.baseline(), cfg).metrics if spec.penetration > 0 else m
    imp = mpg_improvement({"system_mpg": m.system_mpg, "descriptor": m.descriptor},
                          {"system_mpg": base.system_mpg, "descriptor": base.descriptor})
    write_metrics([metrics_row(m, imp)], out / "metrics.csv")
    print(f"simulate {m.run_id} seed={spec.seed} config={h} mpg={m.system_mpg:.4f} "
          f"improvement={imp:+.2f}% throughput={m.throughput_vph:.1f}vph collisions={m.collisions}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    import csv
    from wavesmooth.sim import load_grid, evaluate_matrix, summarize, write_comparisons
    cfg = _load(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    specs = load_grid(args.grid)
    if args.seed is not None:
        specs = [replace(s, seed=args.seed) for s in specs]
    h = config_hash(cfg)
    out = _out(args)
    comps = evaluate_matrix(specs, cfg, jobs=args.jobs)
    write_comparisons(comps, out / "metrics.csv")
    rows = summarize(comps)
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['traj_id']:>10} p={r['penetration']:<5g} lc={int(r['lc_enabled'])} {r['controller']:>10} "
              f"mpg {r['mpg_improvement_mean']:+.2f}% (sd {r['mpg_improvement_std']:.2f}) "
              f"throughput {r['throughput_delta_mean']:+.2f}%")
    collisions = sum(c.controlled.collisions + c.baseline.collisions for c in comps)
    print(f"evaluate runs={len(comps)} config={h} collisions={collisions}")
    return EXIT_FAULT if collisions else EXIT_OK


def cmd_train(args) -> int:
    from wavesmooth.rl.train import train
    cfg = _load(args)
    if args.iterations is not None and args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    h = config_hash(cfg)
    out = _out(args)
    dump_config(cfg, out / "config.yaml")
    res = train(cfg, out, seed=cfg.seed, strict_deterministic=args.strict_deterministic,
                iterations=args.iterations, planner_enabled=False if args.no_planner else None)
    last = res.rows[-1]
    print(f"train iterations={last['iter']} seed={cfg.seed} config={h} "
          f"reward={last['mean_ep_reward']:.4f} policy={out / 'policy.wspol'}")
    return EXIT_OK


def cmd_stability(args) -> int:
    from wavesmooth.dynamics import stability_boundary, string_stable
    cfg = _load(args)
    for v in args.speeds:
        r = string_stable(cfg.idm, v)
        print(f"v={v:6.2f} margin={r.margin:+.6f} {'stable' if r.margin >= 0 else 'unstable'}")
    try:
        print(f"boundary={stability_boundary(cfg.idm):.4f} m/s config={config_hash(cfg)}")
    except ValueError as err:
        print(f"boundary=none ({err}) config={config_hash(cfg)}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from wavesmooth.data import generate_dataset
    paths = generate_dataset(_out(args))
    print(f"gen-data wrote {len(paths)} trajectories to {args.out}")
    return EXIT_OK


def cmd_export_tsd(args) -> int:
    from wavesmooth.sim import export_gap_trace, export_tsd, run_episode
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    cfg = _load(args)
    spec = _spec(args, cfg, record_tsd=True, tsd_stride=args.stride)
    out = _out(args)
    res = run_episode(spec, cfg)
    n = export_tsd(res.tsd, out / "tsd.csv")
    for av, tr in res.gap_traces.items():
        export_gap_trace(tr, out / f"gap_av{av}.csv")
    print(f"export-tsd {res.metrics.run_id} seed={spec.seed} config={config_hash(cfg)} rows={n} "
          f"avs={len(res.gap_traces)}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "evaluate": cmd_evaluate, "train": cmd_train, "stability": cmd_stability,
            "gen-data": cmd_gen_data, "export-tsd": cmd_export_tsd}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (CollisionError, TrainingFault) as err:
        print(f"fault: {err}", file=sys.stderr)
        return EXIT_FAULT
    except (ConfigError, FileNotFoundError, UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
