"""``simcli run --scenario {circular|park-forward|park-reverse}``: closed-loop runs written to CSV and plot files."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from ..nas import NasConfig
from .loop import plot_data, run_closed_loop
from .scenarios import CircularScenario, ParkingScenario, default_constraints

SCENARIOS = ("circular", "park-forward", "park-reverse")
DEFAULT_STEPS = {"circular": 2000, "park-forward": 800, "park-reverse": 800}

CIRCULAR_KEYS = {"vref", "Rad", "alpha", "beta", "Oin", "Oout", "pwidth", "Nn"}
PARKING_KEYS = {"vref", "pwidth", "L1", "R1", "R2", "L2"}
NAS_KEYS = {"maxit", "maxproj", "dualtol", "maxiterref", "backtrack", "decrease", "finitediff"}
CONTROLLER_KEYS = {"dt", "Npar", "Nn", "intmethod", "supnds", "segsearch", "cuptime", "maxrefvelmod",
                   "conpenalty", "contolerance", "onesteppred"}
INT_KEYS = {"Nn", "Npar", "maxit", "maxproj", "maxiterref", "intmethod", "supnds", "segsearch", "onesteppred"}


def parse_config(text: str) -> dict:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    known = CIRCULAR_KEYS | PARKING_KEYS | NAS_KEYS | CONTROLLER_KEYS
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown parameter {key!r}")
        out[key] = int(value) if key in INT_KEYS else float(value)
    return out


def build_run(scenario: str, params: dict):
    """(scenario object, controller config) for a scenario name and config overrides."""
    if scenario == "circular":
        sc = CircularScenario(**{k: v for k, v in params.items() if k in CIRCULAR_KEYS})
    else:
        variant = "forward" if scenario == "park-forward" else "reverse"
        sc = ParkingScenario.with_bounds(default_constraints(), variant=variant,
                                         **{k: v for k, v in params.items() if k in PARKING_KEYS})
    nas_kw = {k: v for k, v in params.items() if k in NAS_KEYS}
    base = sc.controller_config()
    nas = dataclasses.replace(base.nas, **nas_kw)
    ctrl_kw = {k: v for k, v in params.items() if k in CONTROLLER_KEYS}
    return sc, dataclasses.replace(base, nas=nas, **ctrl_kw)


def run(args) -> int:
    params = parse_config(Path(args.config).read_text()) if args.config else {}
    sc, cfg = build_run(args.scenario, params)
    steps = args.steps if args.steps is not None else DEFAULT_STEPS[args.scenario]
    res = run_closed_loop(sc, steps, cfg, seed=args.seed, noise=args.noise,
                          stop_when_finished=args.scenario != "circular")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "log.csv").write_text(res.log.to_csv())
    (out / "trajectory.csv").write_text(res.trajectory.to_csv())
    (out / "plot.dat").write_text(plot_data(res))
    log = res.log
    print(f"{args.scenario}: {len(log)} steps, median solve {1e3 * np.median(log.solve_time):.2f} ms, "
          f"median NAS iterations {np.median(log.iterations):.0f}, faults {int(log.fault.sum())}, "
          f"max corridor violation {log.eps.max():.3f} m")
    print(f"wrote {out / 'log.csv'}, {out / 'trajectory.csv'}, {out / 'plot.dat'}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simcli", description="Closed-loop MPC simulation of the example scenarios.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", choices=SCENARIOS, required=True)
    r.add_argument("--config", help="key=value parameter file")
    r.add_argument("--out", default="simout", help="output directory (default: simout)")
    r.add_argument("--steps", type=int, help="number of sampling steps")
    r.add_argument("--seed", type=int, default=0, help="seed of the measurement noise")
    r.add_argument("--noise", type=float, default=0.0, help="std of Gaussian measurement noise on every state")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    if args.steps is not None and args.steps < 1:
        print("simcli: --steps must be at least 1", file=sys.stderr)
        return 2
    try:
        return run(args)
    except (ValueError, OSError) as exc:
        print(f"simcli: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
