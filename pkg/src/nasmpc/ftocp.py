"""The finite-time optimal control problem: tracking cost, soft corridor penalty and input constraints.

Constraint numbering (0-based ids, ``(4N-2)m`` in total)::

    k*2m + j          lower bound of u_k(j)        k = 0..N-1
    k*2m + m + j      upper bound of u_k(j)
    2Nm + (k-1)*2m + j        lower rate between u_{k-1}(j) and u_k(j), k = 1..N-1
    2Nm + (k-1)*2m + m + j    upper rate

The rate constraint between the previously applied input and u_0 is folded
into the bounds of u_0, which then read max(u_min, u_prev + t_s du_min) and
min(u_max, u_prev + t_s du_max).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import _costs
from .dynamics import IntegratorConfig, rollout
from .model_dsl import ModelSpec
from .reference import REF_FIELDS, REVERSE, RefPoint

QP_REGULARIZATION = 1e-10


@dataclass(frozen=True)
class Weights:
    R: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).ravel()
        Q = np.array(self.Q, dtype=np.float64).ravel()
        if R.size < 2 or Q.size < 5:
            raise ValueError("need at least 2 input weights and 5 state weights")
        if not np.all(R > 0):
            raise ValueError("input weights R must be strictly positive")
        if not np.all(Q >= 0):
            raise ValueError("state weights Q must be non-negative")
        R.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Q", Q)


@dataclass(frozen=True)
class InputConstraints:
    u_min: np.ndarray
    u_max: np.ndarray
    du_min: np.ndarray
    du_max: np.ndarray

    def __post_init__(self):
        arrs = [np.array(getattr(self, f), dtype=np.float64).ravel() for f in ("u_min", "u_max", "du_min", "du_max")]
        if len({a.size for a in arrs}) != 1:
            raise ValueError("all constraint vectors must have the same length")
        u_min, u_max, du_min, du_max = arrs
        if not (np.all(u_min < 0) and np.all(u_max > 0) and np.all(du_min < 0) and np.all(du_max > 0)):
            raise ValueError("every bound and rate interval must be non-empty and contain 0")
        for name, a in zip(("u_min", "u_max", "du_min", "du_max"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def m(self) -> int:
        return self.u_min.size

    @classmethod
    def from_ucon(cls, ucon: Sequence[float]) -> "InputConstraints":
        """From the stacked 4m vector [U_min; U_max; dU_min; dU_max]."""
        ucon = np.asarray(ucon, dtype=np.float64).ravel()
        if ucon.size % 4:
            raise ValueError("Ucon length must be a multiple of 4")
        m = ucon.size // 4
        return cls(ucon[:m], ucon[m:2 * m], ucon[2 * m:3 * m], ucon[3 * m:])

    def to_ucon(self) -> np.ndarray:
        return np.concatenate([self.u_min, self.u_max, self.du_min, self.du_max])


@dataclass(frozen=True)
class PenaltyParams:
    lam: float
    tau: float

    def __post_init__(self):
        if not (self.lam > 0 and self.tau > 0):
            raise ValueError("penalty slope and tolerance must be positive")


def penalty(eps: float, p: PenaltyParams) -> tuple[float, float]:
    """Soft-constraint penalty and its derivative: zero, cubic on (0, tau), then linear with slope lambda."""
    return _costs.penalty(float(eps), p.lam, p.tau), _costs.penalty_d1(float(eps), p.lam, p.tau)


def violation(z, ref) -> tuple[float, float]:
    """(eps_left, eps_right): how far the position in z lies beyond the corridor edges of ref."""
    if isinstance(ref, RefPoint):
        x, y, phi, dl, dr = ref.x, ref.y, ref.phi, ref.d_left, ref.d_right
    else:
        x, y, phi, dl, dr = ref[0], ref[1], ref[2], ref[7], ref[8]
    lat = -math.sin(phi) * (z[0] - x) + math.cos(phi) * (z[1] - y)
    return lat - dl, -lat - dr


@dataclass(frozen=True, eq=False)
class FtocpInstance:
    """One FTOCP: horizon references (N x 9, global), weights, input limits and the initial condition.

    ``direction`` is the driving mode the references are tracked in; in
    reverse the heading target is the path angle plus pi and speed and
    acceleration targets change sign. ``u_prev`` is clamped into the bounds.
    """

    model: ModelSpec
    integrator: IntegratorConfig
    refs: np.ndarray
    weights: Weights
    constraints: InputConstraints
    penalty: PenaltyParams
    u_prev: np.ndarray
    z0: np.ndarray
    direction: int = 1
    zref: np.ndarray = field(init=False, repr=False)
    uref: np.ndarray = field(init=False, repr=False)
    lo: np.ndarray = field(init=False, repr=False)
    hi: np.ndarray = field(init=False, repr=False)
    _cargs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        n, m = self.model.n, self.model.m
        refs = np.array(self.refs, dtype=np.float64).reshape(-1, len(REF_FIELDS))
        N = refs.shape[0]
        if N < 1:
            raise ValueError("horizon must contain at least one reference point")
        if self.weights.R.size != m or self.weights.Q.size != n:
            raise ValueError(f"weights must have sizes m={m} and n={n}")
        if self.constraints.m != m:
            raise ValueError(f"input constraints must have size m={m}")
        c = self.constraints
        u_prev = np.clip(np.array(self.u_prev, dtype=np.float64).ravel(), c.u_min, c.u_max)
        z0 = np.array(self.z0, dtype=np.float64).ravel()
        if u_prev.size != m or z0.size != n:
            raise ValueError("u_prev or z0 has the wrong size")
        sign = -1.0 if self.direction == REVERSE else 1.0
        zref = np.zeros((N, n))
        zref[:, 0] = refs[:, 0]
        zref[:, 1] = refs[:, 1]
        zref[:, 2] = refs[:, 2] + (math.pi if sign < 0 else 0.0)
        zref[:, 3] = sign * refs[:, 3]
        zref[:, 4] = refs[:, 5]
        uref = np.zeros((N, m))
        uref[:, 0] = sign * refs[:, 4]
        ts = self.integrator.dt
        lo = np.tile(c.u_min, (N, 1))
        hi = np.tile(c.u_max, (N, 1))
        lo[0] = np.maximum(c.u_min, u_prev + ts * c.du_min)
        hi[0] = np.minimum(c.u_max, u_prev + ts * c.du_max)
        for name, arr in (("refs", refs), ("u_prev", u_prev), ("z0", z0), ("zref", zref),
                          ("uref", uref), ("lo", lo), ("hi", hi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_cargs", (
            zref, uref, np.ascontiguousarray(refs[:, 2]), np.ascontiguousarray(refs[:, 7]),
            np.ascontiguousarray(refs[:, 8]), self.weights.R, self.weights.Q,
            float(self.penalty.lam), float(self.penalty.tau)))

    @property
    def N(self) -> int:
        return self.refs.shape[0]

    @property
    def t_s(self) -> float:
        return self.integrator.dt

    @property
    def n_constraints(self) -> int:
        return (4 * self.N - 2) * self.model.m

    def cost_args(self):
        """Positional arguments of the cost kernels after (Z, U)."""
        return self._cargs

    def replace(self, **changes) -> "FtocpInstance":
        kw = {f: getattr(self, f) for f in ("model", "integrator", "refs", "weights", "constraints",
                                             "penalty", "u_prev", "z0", "direction")}
        kw.update(changes)
        return FtocpInstance(**kw)


def _as_inputs(U, inst: FtocpInstance) -> np.ndarray:
    return np.ascontiguousarray(U, dtype=np.float64).reshape(inst.N, inst.model.m)


def total_cost(U, Z, inst: FtocpInstance) -> float:
    """Cost of an input sequence and its (caller-supplied) state sequence.

    Z may hold z_0..z_N or z_1..z_N; it is not re-simulated here.
    """
    U = _as_inputs(U, inst)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if Z.shape[0] == inst.N:
        Z = np.vstack([inst.z0, Z])
    return float(_costs.total_cost(Z, U, *inst.cost_args()))


def simulate_cost(U, inst: FtocpInstance) -> tuple[float, np.ndarray]:
    """Roll U out from z0 and return (cost, Z)."""
    U = _as_inputs(U, inst)
    Z = rollout(inst.model, inst.z0, U, inst.integrator)
    return float(_costs.total_cost(Z, U, *inst.cost_args())), Z


def constraint_values(U, inst: FtocpInstance) -> np.ndarray:
    """All (4N-2)m constraint residuals g_l(U); feasible iff every entry is <= 0."""
    U = _as_inputs(U, inst)
    N, m = U.shape
    c = inst.constraints
    g = np.empty((4 * N - 2) * m)
    b = g[:2 * N * m].reshape(N, 2, m)
    b[:, 0] = inst.lo - U
    b[:, 1] = U - inst.hi
    if N > 1:
        rate = (U[1:] - U[:-1]) / inst.t_s
        r = g[2 * N * m:].reshape(N - 1, 2, m)
        r[:, 0] = c.du_min - rate
        r[:, 1] = rate - c.du_max
    return g


def constraint_gradient(dU, inst: FtocpInstance) -> np.ndarray:
    """Directional change of every residual along dU (the constraints are affine)."""
    dU = _as_inputs(dU, inst)
    N, m = dU.shape
    d = np.empty((4 * N - 2) * m)
    b = d[:2 * N * m].reshape(N, 2, m)
    b[:, 0] = -dU
    b[:, 1] = dU
    if N > 1:
        rate = (dU[1:] - dU[:-1]) / inst.t_s
        r = d[2 * N * m:].reshape(N - 1, 2, m)
        r[:, 0] = -rate
        r[:, 1] = rate
    return d


def project_feasible(U, inst: FtocpInstance) -> np.ndarray:
    """Forward clamp into bounds and the rate window around the previous input.

    Only entries that actually violate something are touched, so a feasible
    sequence comes back bit-identical.
    """
    U = _as_inputs(U, inst).copy()
    c = inst.constraints
    _project_rows(U, inst.lo[0], inst.hi[0], c.u_min, c.u_max, c.du_min, c.du_max, inst.t_s)
    return U


@njit(cache=True, error_model="numpy", nogil=True)
def _project_rows(U, lo0, hi0, umin, umax, dumin, dumax, ts):
    N, m = U.shape
    for j in range(m):
        if U[0, j] < lo0[j] or U[0, j] > hi0[j]:
            U[0, j] = min(max(U[0, j], lo0[j]), hi0[j])
    for k in range(1, N):
        for j in range(m):
            u = U[k, j]
            prev = U[k - 1, j]
            rate = (u - prev) / ts
            if u < umin[j] or u > umax[j] or rate < dumin[j] or rate > dumax[j]:
                lo = max(umin[j], prev + ts * dumin[j])
                hi = min(umax[j], prev + ts * dumax[j])
                U[k, j] = min(max(u, lo), hi)


def max_residual(U, inst: FtocpInstance) -> float:
    return float(np.max(constraint_values(U, inst)))


def build_instance(model: ModelSpec, integrator: IntegratorConfig, refs, weights: Weights,
                   constraints: InputConstraints, penalty_params: PenaltyParams,
                   u_prev, z0, direction: int = 1) -> FtocpInstance:
    return FtocpInstance(model, integrator, refs, weights, constraints, penalty_params,
                         np.asarray(u_prev, dtype=np.float64), np.asarray(z0, dtype=np.float64), direction)


def refs_from_points(points: Sequence[RefPoint]) -> np.ndarray:
    return np.array([p.as_array() for p in points])


def describe_constraint(l: int, N: int, m: int) -> tuple[str, int, int, int]:
    """(kind, k, j, side) for constraint id l; kind is 'bound' or 'rate', side -1 lower / +1 upper."""
    nb = 2 * N * m
    if l < nb:
        k, r = divmod(l, 2 * m)
        kind = "bound"
    else:
        k, r = divmod(l - nb, 2 * m)
        k += 1
        kind = "rate"
    side, j = divmod(r, m)
    return kind, k, j, (1 if side else -1)


def bound_id(k: int, j: int, side: int, m: int) -> int:
    return k * 2 * m + (m if side > 0 else 0) + j


def rate_id(k: int, j: int, side: int, N: int, m: int) -> int:
    return 2 * N * m + (k - 1) * 2 * m + (m if side > 0 else 0) + j
