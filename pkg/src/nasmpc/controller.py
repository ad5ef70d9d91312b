"""Receding-horizon controller: one FTOCP solve per sampling instant plus driving-mode logic.

Driving modes: 0 standstill, 1 forward, 2 reverse. The controller only
switches between forward and reverse through standstill, and it only leaves
standstill when the vehicle is at rest (|v| <= v_still). The very first
engagement may also happen while rolling in the commanded direction.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import IntegratorConfig, integrate_step
from .errors import NasMpcError, NoMatch, TrajectoryError
from .ftocp import FtocpInstance, InputConstraints, PenaltyParams, Weights
from .model_dsl import ModelSpec, builtin_kbm
from .nas import KktWorkspace, NasConfig, NasResult, nas_solve, warm_start
from .reference import (
    CIRCULAR_PATH,
    FORWARD,
    REVERSE,
    STANDSTILL,
    TRAJECTORY,
    C_DELTA,
    C_PHI,
    Localization,
    ReferenceBlock,
    Trajectory,
    generate_references,
    localize,
    to_local,
    validate_trajectory,
)

log = logging.getLogger(__name__)

WIDE_CORRIDOR = 1e3


@dataclass(frozen=True)
class ControllerConfig:
    """Controller parameters; names follow the code parameters where one exists."""

    dt: float = 0.05
    Npar: int = 30
    Nn: int = 100
    segsearch: int = 5
    cuptime: float = 2.0
    maxrefvelmod: float = 0.3
    conpenalty: float = 100.0
    contolerance: float = 0.1
    onesteppred: int = 0
    intmethod: int = 5
    supnds: int = 0
    newtontol: float = 1e-14
    newtonit: int = 10
    nas: NasConfig = NasConfig(opttol=1e-7)   # closed loop: stop once the predicted gain is negligible
    v_still: float = 0.05
    standstill_time: float = 1.0       # dwell before a direction change on paths
    stop_radius: float = 0.5           # how close to a stop node counts as arrived
    brake_decel: float = 2.0           # deceleration of braking references, m/s^2

    def __post_init__(self):
        if not self.dt > 0 or self.Npar < 1 or self.Nn < 1 or self.segsearch < 1:
            raise ValueError("need dt > 0, Npar >= 1, Nn >= 1, segsearch >= 1")
        if self.onesteppred not in (0, 1):
            raise ValueError("onesteppred must be 0 or 1")

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(dt=self.dt, method=self.intmethod, supnds=self.supnds,
                                newtontol=self.newtontol, newtonit=self.newtonit,
                                finitediff=self.nas.finitediff)


@dataclass
class ControllerOutputs:
    drivmode: int
    u0: np.ndarray
    Useq: np.ndarray
    Ref: np.ndarray
    Zseq: np.ndarray
    # diagnostics, not part of the output block
    cost: float = math.nan
    iterations: int = 0
    reason: str = ""
    fault: bool = False
    localization: Optional[Localization] = None
    solve_time: float = 0.0

    def to_flat(self) -> np.ndarray:
        return np.concatenate([[float(self.drivmode)], self.u0, self.Useq, self.Ref, self.Zseq])


@dataclass
class ControllerState:
    trajectory: Optional[Trajectory] = None
    stamp: float = -math.inf
    prev: Optional[NasResult] = None
    u_prev: Optional[np.ndarray] = None
    mode: int = STANDSTILL
    engaged: bool = False              # has ever left standstill
    pending: Optional[int] = None      # mode to engage after the dwell
    release_time: float = math.inf
    hold: Optional[np.ndarray] = None  # (x, y, path angle) held while in standstill
    hold_dir: int = FORWARD
    hold_delta: float = 0.0
    finished: bool = False
    loc: Optional[Localization] = None
    fault: bool = False
    last_error: Optional[str] = None
    last_ref: Optional[np.ndarray] = None
    last_v: float = 0.0
    time: float = 0.0


class Controller:
    def __init__(self, cfg: ControllerConfig = ControllerConfig(), model: Optional[ModelSpec] = None,
                 weights: Optional[Weights] = None, constraints: Optional[InputConstraints] = None):
        self.cfg = cfg
        self.model = model or builtin_kbm()
        n, m = self.model.n, self.model.m
        self.weights = weights or Weights(np.ones(m), np.ones(n))
        self.constraints = constraints or InputConstraints(-np.ones(m), np.ones(m), -np.ones(m), np.ones(m))
        self.integrator = cfg.integrator
        self.state = ControllerState(u_prev=np.zeros(m))
        self._ws = KktWorkspace(cfg.Npar, n, m)

    # -- trajectory input ------------------------------------------------------

    def submit_trajectory(self, raw) -> bool:
        """Accept a new trajectory if it validates and carries a newer time stamp."""
        st = self.state
        try:
            traj = raw if isinstance(raw, Trajectory) else validate_trajectory(raw, self.cfg.Nn)
        except TrajectoryError as exc:
            st.last_error = f"{type(exc).__name__}: {exc}"
            log.warning("trajectory rejected: %s", st.last_error)
            return False
        if not traj.header.T > st.stamp:
            st.last_error = f"stale time stamp {traj.header.T} <= {st.stamp}"
            return False
        st.trajectory = traj
        st.stamp = traj.header.T
        st.loc = None
        st.finished = False
        st.last_error = None
        return True

    # -- one sampling instant ----------------------------------------------------

    def mpc_step(self, z_hat, weights: Optional[Weights] = None, ucon=None,
                 now: Optional[float] = None) -> ControllerOutputs:
        cfg, st = self.cfg, self.state
        if weights is not None:
            self.weights = weights
        if ucon is not None:
            self.constraints = ucon if isinstance(ucon, InputConstraints) else InputConstraints.from_ucon(ucon)
        now = st.time if now is None else float(now)
        st.time = now + cfg.dt
        c = self.constraints
        st.u_prev = np.clip(np.where(np.isfinite(st.u_prev), st.u_prev, 0.0), c.u_min, c.u_max)
        t0 = time.perf_counter()
        try:
            z_hat = np.asarray(z_hat, dtype=np.float64).ravel()
            if z_hat.size != self.model.n or not np.all(np.isfinite(z_hat)):
                raise NasMpcError("state measurement is not finite")
            if cfg.onesteppred:
                z0 = integrate_step(self.model, z_hat, st.u_prev, self.integrator)
            else:
                z0 = z_hat
            out = self._regular_step(z0, now)
        except (NasMpcError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.warning("fault at t=%.3f: %s", now, exc)
            out = self._fault_step(z_hat)
        out.solve_time = time.perf_counter() - t0
        st.u_prev = out.u0.copy()
        return out

    def _regular_step(self, z0, now) -> ControllerOutputs:
        cfg, st = self.cfg, self.state
        v = float(z0[3])
        st.last_v = v
        at_rest = abs(v) <= cfg.v_still
        block, direction = self._references(z0, now, at_rest)
        inst = FtocpInstance(self.model, self.integrator, block, self.weights, self.constraints,
                             PenaltyParams(cfg.conpenalty, cfg.contolerance), st.u_prev, z0, direction)
        U0 = warm_start(st.prev, inst)
        res = nas_solve(inst, U0, cfg.nas, self._ws)
        if not np.all(np.isfinite(res.U)):
            raise NasMpcError("solver returned a non-finite input")
        st.prev = res
        st.fault = False
        st.last_ref = block.ravel().copy()
        return ControllerOutputs(st.mode, res.U[0].copy(), res.U.ravel().copy(), st.last_ref.copy(),
                                 res.Z.ravel().copy(), res.cost, res.iterations, res.reason, False, st.loc)

    # -- mode machine and references -----------------------------------------------

    def _references(self, z0, now, at_rest):
        """Reference block (N x 9) and tracking direction for this step; updates the mode machine."""
        cfg, st = self.cfg, self.state
        traj = st.trajectory
        if traj is None or st.finished:
            return self._stand(z0, at_rest)
        pos = to_local(traj, z0[:2])

        if st.mode == STANDSTILL:
            if st.pending is None:
                # not yet engaged on this trajectory: follow the mode of the closest segment
                loc = self._localize(traj, pos, None, now)
                target = int(traj.modes[loc.seg])
                if target == STANDSTILL:
                    target = self._next_driving_mode(traj, loc.seg)
                    if target is None:
                        return self._stand(z0, at_rest)
                sgn = 1.0 if target == FORWARD else -1.0
                rolling_ok = not st.engaged and sgn * z0[3] >= -cfg.v_still
                if at_rest or rolling_ok:
                    self._engage(target, loc)
                else:
                    return self._stand(z0, at_rest)
            elif at_rest and now >= st.release_time:
                self._engage(st.pending, st.loc)
            else:
                return self._stand(z0, at_rest)

        mode = st.mode
        loc = self._localize(traj, pos, mode, now)
        if traj.modes[loc.seg] != mode:
            # the trajectory wants another direction here: brake, then change at rest
            if at_rest:
                target = int(traj.modes[loc.seg])
                if target == STANDSTILL:
                    target = self._next_driving_mode(traj, loc.seg)
                self._enter_standstill(z0, target, now + cfg.standstill_time, loc)
                return self._stand(z0, at_rest)
            return self._braking(z0), mode
        st.loc = loc
        block = generate_references(traj, loc, now, cfg.Npar, cfg.dt, cfg.cuptime, cfg.maxrefvelmod)
        if block.stop and at_rest:
            d = math.hypot(z0[0] - block.stop_point[0], z0[1] - block.stop_point[1])
            if d <= cfg.stop_radius:
                node = (block.stop_point[0], block.stop_point[1],
                        traj.segments[block.stop_seg, C_PHI] + traj.header.Phi)
                if block.is_end:
                    st.finished = True
                    self._enter_standstill(z0, None, math.inf, loc, node)
                else:
                    target = self._next_driving_mode(traj, block.stop_seg)
                    self._enter_standstill(z0, target, self._release_time(traj, block, now), loc, node)
                return self._stand(z0, at_rest)
        return np.array(block.values), mode

    def _localize(self, traj, pos, mode, now):
        st, cfg = self.state, self.cfg
        filt = mode if mode in (FORWARD, REVERSE) else None
        try:
            return localize(traj, pos, st.loc, cfg.segsearch, filt, now)
        except NoMatch:
            return localize(traj, pos, st.loc, cfg.segsearch, None, now)

    def _next_driving_mode(self, traj, seg):
        S = traj.S
        for step in range(1, S + 1):
            i = seg + step
            if i >= S:
                if traj.ptype != CIRCULAR_PATH:
                    return None
                i -= S
            if traj.modes[i] != STANDSTILL:
                return int(traj.modes[i])
        return None

    def _release_time(self, traj, block: ReferenceBlock, now):
        if traj.ptype == TRAJECTORY:
            # the schedule says when to leave: passing time of the last standstill node
            i = block.stop_seg + 1
            t_leave = None
            while i < traj.S and traj.modes[i] == STANDSTILL:
                t_leave = traj.header.T + traj.segments[i, 0]
                i += 1
            if t_leave is not None:
                return max(t_leave, now)
        return now + self.cfg.standstill_time

    def _engage(self, mode, loc):
        st = self.state
        if mode != st.mode:
            st.prev = None
        st.mode = mode
        st.engaged = True
        st.pending = None
        st.release_time = math.inf
        st.loc = loc

    def _enter_standstill(self, z0, target, release_time, loc, node=None):
        """Switch to standstill; ``node`` (x, y, path angle) is the stop node to hold, else the current pose."""
        st = self.state
        if st.mode in (FORWARD, REVERSE):
            st.hold_dir = st.mode
        st.mode = STANDSTILL
        st.pending = target
        st.release_time = release_time
        if node is None:
            st.hold_dir = FORWARD
            node = (z0[0], z0[1], z0[2])
        st.hold = np.array(node, dtype=np.float64)
        st.loc = loc
        st.hold_delta = float(z0[4])
        traj = st.trajectory
        if target is not None and traj is not None:
            seg = loc.seg
            for step in range(traj.S):
                i = (seg + step) % traj.S
                if traj.modes[i] == target:
                    st.hold_delta = float(traj.segments[i, C_DELTA])
                    break

    def _stand(self, z0, at_rest):
        """Hold position (or come to rest) with zero speed; drivmode 0 once at rest."""
        st = self.state
        if st.mode != STANDSTILL:
            if not at_rest:
                return self._braking(z0), st.mode
            st.mode = STANDSTILL
            st.hold = None
        if st.hold is None:
            st.hold = np.array([z0[0], z0[1], z0[2]])
            st.hold_dir = FORWARD
            st.hold_delta = float(z0[4])
        x, y, phi = st.hold
        refs = np.zeros((self.cfg.Npar, 9))
        refs[:, 0], refs[:, 1], refs[:, 2] = x, y, phi
        refs[:, 5] = st.hold_delta
        refs[:, 7] = refs[:, 8] = WIDE_CORRIDOR
        return refs, st.hold_dir

    def _braking(self, z0):
        """References decelerating to a standstill straight ahead of the current pose."""
        cfg = self.cfg
        v = float(z0[3])
        sgn = 1.0 if v >= 0 else -1.0
        decel = min(cfg.brake_decel, float(abs(self.constraints.u_min[0])) if sgn > 0
                    else float(self.constraints.u_max[0]))
        phi_path = float(z0[2]) if sgn > 0 else float(z0[2]) + math.pi
        t = cfg.dt * np.arange(1, cfg.Npar + 1)
        speed = np.maximum(abs(v) - decel * t, 0.0)
        t_stop = abs(v) / decel
        tt = np.minimum(t, t_stop)
        s = abs(v) * tt - 0.5 * decel * tt * tt
        refs = np.zeros((cfg.Npar, 9))
        refs[:, 0] = z0[0] + s * math.cos(phi_path)
        refs[:, 1] = z0[1] + s * math.sin(phi_path)
        refs[:, 2] = phi_path
        refs[:, 3] = speed
        refs[:, 4] = np.where(speed > 0, -decel, 0.0)
        refs[:, 5] = z0[4]
        refs[:, 7] = refs[:, 8] = WIDE_CORRIDOR
        return refs

    # -- fault path ------------------------------------------------------------------

    def _fault_step(self, z_hat) -> ControllerOutputs:
        """Maximum braking within bounds and rate window, other inputs as close to zero as allowed."""
        cfg, st = self.cfg, self.state
        c = self.constraints
        m, n, N = self.model.m, self.model.n, cfg.Npar
        lo = np.maximum(c.u_min, st.u_prev + cfg.dt * c.du_min)
        hi = np.minimum(c.u_max, st.u_prev + cfg.dt * c.du_max)
        try:
            z_hat = np.asarray(z_hat, dtype=np.float64).ravel()
        except (TypeError, ValueError):
            z_hat = np.full(n, np.nan)
        v = st.last_v
        if z_hat.size == n and np.isfinite(z_hat[3]):
            v = float(z_hat[3])
        u0 = np.clip(np.zeros(m), lo, hi)
        if v > cfg.v_still:
            u0[0] = lo[0]
        elif v < -cfg.v_still:
            u0[0] = hi[0]
        st.fault = True
        st.prev = None
        ref = st.last_ref if st.last_ref is not None else np.zeros(9 * N)
        z = z_hat if z_hat.size == n else np.full(n, np.nan)
        return ControllerOutputs(st.mode, u0, np.tile(u0, N), ref.copy(), np.tile(z, N + 1),
                                 math.nan, 0, "fault", True, st.loc)
