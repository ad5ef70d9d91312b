"""Closed-loop simulation: controller in the loop with a finer-integrated plant."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Optional, Union

import numpy as np

from ..controller import Controller, ControllerConfig
from ..dynamics import IntegratorConfig, integrate_step
from ..errors import NasMpcError, NoMatch
from ..ftocp import InputConstraints, Weights
from ..model_dsl import ModelSpec
from ..reference import C_DLEFT, C_DRIGHT, FORWARD, REVERSE, Trajectory, localize, to_local
from .scenarios import (
    CircularScenario,
    ParkingScenario,
    default_constraints,
    default_weights,
    scenario_circular,
    scenario_parking,
)

LOG_VERSION = 1
PLANT_SUBSTEPS = 9


@dataclass
class SimLog:
    """Per-step columns of a closed-loop run; row k is logged before the input of step k is applied."""

    time: np.ndarray
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    ddelta: np.ndarray
    drivmode: np.ndarray
    seg: np.ndarray
    s: np.ndarray
    dist: np.ndarray
    lateral: np.ndarray      # signed offset from the localized segment, left positive
    eps: np.ndarray          # corridor violation at the plant position, <= 0 inside
    cost: np.ndarray
    iterations: np.ndarray
    solve_time: np.ndarray
    fault: np.ndarray

    @classmethod
    def empty(cls, steps: int) -> "SimLog":
        ints = {"drivmode", "seg", "iterations", "fault"}
        return cls(**{f.name: np.zeros(steps, dtype=np.int64 if f.name in ints else np.float64)
                      for f in fields(cls)})

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self))

    def __len__(self):
        return self.time.size

    def truncate(self, k: int) -> "SimLog":
        return SimLog(**{c: getattr(self, c)[:k].copy() for c in self.columns})

    def to_csv(self) -> str:
        lines = [f"# simlog version {LOG_VERSION}", ",".join(self.columns)]
        cols = [getattr(self, c) for c in self.columns]
        for k in range(len(self)):
            lines.append(",".join(repr(int(col[k])) if col.dtype.kind == "i" else repr(float(col[k]))
                                  for col in cols))
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        """Equality of the deterministic columns; solve_time is a wall-clock measurement and is ignored."""
        if not isinstance(other, SimLog):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=True)
                   for c in self.columns if c != "solve_time")


@dataclass
class SimResult:
    log: SimLog
    trajectory: Trajectory
    controller: Controller


def corridor_error(traj: Trajectory, pos_global, seg: int) -> tuple[float, float]:
    """(lateral offset, violation) of a global position against segment ``seg`` of the corridor."""
    p = to_local(traj, pos_global)
    a, b = traj.starts[seg], traj.ends[seg]
    L = traj.lengths[seg]
    if L <= 0:
        return 0.0, -min(traj.segments[seg, C_DLEFT], traj.segments[seg, C_DRIGHT])
    ux, uy = (b[0] - a[0]) / L, (b[1] - a[1]) / L
    lat = -uy * (p[0] - a[0]) + ux * (p[1] - a[1])
    return lat, max(lat - traj.segments[seg, C_DLEFT], -lat - traj.segments[seg, C_DRIGHT])


Scenario = Union[CircularScenario, ParkingScenario, Trajectory]


def _setup(scenario: Scenario, constraints: InputConstraints):
    if isinstance(scenario, CircularScenario):
        return scenario_circular(scenario), scenario.initial_state()
    if isinstance(scenario, ParkingScenario):
        return scenario_parking(scenario), scenario.initial_state()
    if isinstance(scenario, Trajectory):
        return scenario, None
    raise TypeError(f"unsupported scenario {type(scenario).__name__}")


def run_closed_loop(scenario: Scenario, steps: int, cfg: Optional[ControllerConfig] = None, seed: int = 0,
                    noise: float = 0.0, z0=None, plant: Optional[ModelSpec] = None,
                    weights: Optional[Weights] = None, constraints: Optional[InputConstraints] = None,
                    plant_supnds: int = PLANT_SUBSTEPS, stop_when_finished: bool = False) -> SimResult:
    """Simulate ``steps`` sampling intervals. Noise is zero-mean Gaussian on the measured state, std ``noise``."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    constraints = constraints or default_constraints()
    weights = weights or default_weights()
    traj, z_init = _setup(scenario, constraints)
    if z0 is None:
        if z_init is None:
            raise ValueError("an initial state is required when a bare trajectory is given")
        z0 = z_init
    if cfg is None:
        cfg = scenario.controller_config() if hasattr(scenario, "controller_config") else ControllerConfig()
    if cfg.Nn < traj.S:
        cfg = replace(cfg, Nn=traj.S)
    ctrl = Controller(cfg, weights=weights, constraints=constraints)
    if plant is None:
        plant = ctrl.model
    if not ctrl.submit_trajectory(traj.to_flat(cfg.Nn)):
        raise ValueError(f"scenario trajectory rejected: {ctrl.state.last_error}")
    plant_cfg = IntegratorConfig(dt=cfg.dt, method=cfg.intmethod, supnds=plant_supnds)
    rng = np.random.default_rng(seed)
    log = SimLog.empty(steps)
    z = np.array(z0, dtype=np.float64)
    seg = 0
    prev_loc = None
    for k in range(steps):
        t = k * cfg.dt
        z_meas = z + noise * rng.standard_normal(z.size) if noise > 0 else z
        out = ctrl.mpc_step(z_meas, now=t)
        # corridor bookkeeping against the true position, independent of the controller
        filt = out.drivmode if out.drivmode in (FORWARD, REVERSE) else None
        try:
            prev_loc = localize(traj, to_local(traj, z[:2]), prev_loc, cfg.segsearch, filt, t)
            seg = prev_loc.seg
        except NoMatch:
            pass
        lat, eps = corridor_error(traj, z[:2], seg)
        loc = out.localization
        row = dict(time=t, x=z[0], y=z[1], phi=z[2], v=z[3], delta=z[4], a=out.u0[0], ddelta=out.u0[1],
                   drivmode=out.drivmode, seg=loc.seg if loc else -1, s=loc.s if loc else math.nan,
                   dist=loc.dist if loc else math.nan, lateral=lat, eps=eps, cost=out.cost,
                   iterations=out.iterations, solve_time=out.solve_time, fault=int(out.fault))
        for name, value in row.items():
            getattr(log, name)[k] = value
        try:
            z = integrate_step(plant, z, out.u0, plant_cfg)
        except NasMpcError:
            return SimResult(log.truncate(k + 1), traj, ctrl)
        if stop_when_finished and ctrl.state.finished and abs(z[3]) <= cfg.v_still:
            return SimResult(log.truncate(k + 1), traj, ctrl)
    return SimResult(log, traj, ctrl)


def plot_data(res: SimResult, step: float = 0.25) -> str:
    """Whitespace-separated columns: x_ref y_ref x_left y_left x_right y_right x_path y_path.

    Reference and corridor edges are resampled along the path; shorter columns
    are padded with NaN so every line has 8 fields.
    """
    traj = res.trajectory
    h = traj.header
    c, s = math.cos(h.Phi), math.sin(h.Phi)
    ref, left, right = [], [], []
    for i in range(traj.S):
        L = traj.lengths[i]
        if L <= 0:
            continue
        a, b = traj.starts[i], traj.ends[i]
        ux, uy = (b[0] - a[0]) / L, (b[1] - a[1]) / L
        for w in np.linspace(0.0, 1.0, max(2, int(math.ceil(L / step)) + 1)):
            px, py = a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])
            dl, dr = traj.segments[i, C_DLEFT], traj.segments[i, C_DRIGHT]
            for lst, (qx, qy) in ((ref, (px, py)), (left, (px - uy * dl, py + ux * dl)),
                                  (right, (px + uy * dr, py - ux * dr))):
                lst.append((h.X + c * qx - s * qy, h.Y + s * qx + c * qy))
    path = list(zip(res.log.x, res.log.y))
    rows = max(len(ref), len(path))
    cols = [ref, left, right, path]
    lines = ["# x_ref y_ref x_left y_left x_right y_right x_path y_path"]
    for r in range(rows):
        vals = []
        for col in cols:
            vals.extend(col[r] if r < len(col) else (math.nan, math.nan))
        lines.append(" ".join(f"{v:.6f}" for v in vals))
    return "\n".join(lines) + "\n"
