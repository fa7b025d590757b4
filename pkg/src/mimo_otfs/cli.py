"""Command line entry point: sweep, oracle-check, schedule, overhead."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .dl_estimate import SchedulingError, pilot_overhead
from .harness import ExperimentConfig, build_setup, compare_solvers, oracle_suite, run_sweep, schedule_scenario


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_ini(Path(args.config).read_text(), args.profile)
    else:
        cfg = ExperimentConfig.from_profile(args.profile or "small")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _emit(obj, out: Optional[str], name: str) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text + "\n")
    print(text)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else None
    if args.compare:
        _emit(compare_solvers(cfg, out), None, "")
        return 0
    _, summary = run_sweep(cfg, out)
    for p in summary["points"]:
        print(f"{cfg.sweep}={p['value']:g}  mse_g {p['mse_g_db']:.2f} dB  mse_hno {p['mse_hno_db']:.2f} dB"
              f"  failures {p['failures']}/{p['trials']}")
    return 0


def cmd_oracle(args) -> int:
    res = oracle_suite(args.profile or "small", args.seed or 0)
    _emit(res, args.out, "oracle.json")
    ok = res["roundtrip"] < 1e-10 and res["zero_doppler"] < 1e-9 and res["monotone"]
    return 0 if ok else 1


def cmd_schedule(args) -> int:
    cfg = _config(args)
    setup = build_setup(cfg)
    try:
        plan, sigs, violations = schedule_scenario(args.users or max(cfg.num_users, 2), cfg.num_paths,
                                                   setup.otfs, cfg.num_antennas, cfg.seed)
    except SchedulingError as exc:
        print(f"scheduling failed: {exc}", file=sys.stderr)
        return 1
    obj = {"plan": json.loads(plan.to_json()), "signatures": [json.loads(s.to_json()) for s in sigs],
           "violations": violations}
    _emit(obj, args.out, "schedule.json")
    return 0 if not violations else 1


def cmd_overhead(args) -> int:
    cfg = _config(args)
    K = args.users or cfg.num_users
    rep = pilot_overhead(cfg.dl_scheme, K, cfg.num_paths, cfg.num_antennas, cfg.H_d, cfg.H_D,
                         cfg.train_len, cfg.cp_len)
    obj = dict(dataclasses.asdict(rep), K=K, P=cfg.num_paths, M=cfg.num_antennas, dl_grids=rep.dl_grids)
    _emit(obj, args.out, "overhead.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with an [experiment] section")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--profile", choices=["small", "paper"], help="parameter profile")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mimo-otfs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sweep", parents=[common], help="run a Monte-Carlo sweep")
    p.add_argument("--compare", action="store_true", help="run full and fast solvers on paired seeds")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("oracle-check", parents=[common], help="closed form vs time-domain simulation")
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("schedule", parents=[common], help="emit a scheduling plan for a random scenario")
    p.add_argument("--users", type=int)
    p.set_defaults(func=cmd_schedule)
    p = sub.add_parser("overhead", parents=[common], help="pilot overhead report")
    p.add_argument("--users", type=int)
    p.set_defaults(func=cmd_overhead)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
