"""Nonlinear Active Set iterations: local QP, structured KKT solve, projected backtracking line search."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import _costs, _tape
from ..dynamics import linearize_trajectory
from ..errors import NasMpcError, NoDecrease
from ..ftocp import (
    QP_REGULARIZATION,
    FtocpInstance,
    constraint_gradient,
    constraint_values,
    describe_constraint,
    project_feasible,
    simulate_cost,
)
from .active_set import ActiveSet, clean_direction, constraint_multipliers, project_direction, release_constraints
from .kkt import KktWorkspace, solve_structured

FEASIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class NasConfig:
    """Solver parameters, named after the code parameters they correspond to.

    ``maxlsit`` caps the backtracking trials per line search. A search
    direction counts as zero when its largest entry is below ``steptol``
    (relative to the inputs) or when the decrease it predicts is below
    ``opttol`` (relative to the cost). These three are additions needed to
    make termination well defined.
    """

    maxit: int = 10
    maxproj: int = 10
    dualtol: float = 1e-10
    maxiterref: int = 1
    backtrack: float = 0.5
    decrease: float = 1e-4
    finitediff: float = 1e-6
    maxlsit: int = 30
    steptol: float = 1e-10
    opttol: float = 1e-13

    def __post_init__(self):
        if self.maxit < 0 or self.maxproj < 0 or self.maxiterref < 0:
            raise ValueError("maxit, maxproj and maxiterref must be non-negative")
        if not (0 < self.backtrack < 1 and 0 < self.decrease < 1):
            raise ValueError("backtrack and decrease must lie in (0, 1)")
        if not (self.dualtol > 0 and self.finitediff > 0 and self.steptol > 0):
            raise ValueError("dualtol, finitediff and steptol must be positive")
        if self.maxlsit < 1:
            raise ValueError("maxlsit must be at least 1")


@dataclass
class LocalQp:
    """Linearization at (U, Z): A (N,n,n), B (N,n,m), gradients e (N,m), f (N,n), diagonal curvature hu, hz."""

    A: np.ndarray
    B: np.ndarray
    e: np.ndarray
    f: np.ndarray
    hu: np.ndarray
    hz: np.ndarray

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def g(self) -> np.ndarray:
        return np.hstack([self.e, self.f])

    @property
    def h(self) -> np.ndarray:
        return np.hstack([self.hu, self.hz])

    def propagate(self, Ud: np.ndarray) -> np.ndarray:
        Zd = np.empty((self.N, self.A.shape[1]))
        _tape.propagate(self.A, self.B, np.ascontiguousarray(Ud), Zd)
        return Zd

    def slope(self, Ud, Zd, Uacc=None, Zacc=None) -> float:
        """Directional derivative of the quadratic model, at the model point (Uacc, Zacc) if given."""
        gu, gz = self.e, self.f
        if Uacc is not None:
            gu = gu + self.hu * Uacc
            gz = gz + self.hz * Zacc
        return float(np.sum(gu * Ud) + np.sum(gz * Zd))


@dataclass
class KktSolution:
    Ud: np.ndarray           # cleaned input direction (N, m)
    Zd: np.ndarray           # state response of Ud (N, n), rows are dz_1..dz_N
    xi: np.ndarray           # raw KKT primal solution (N, m+n)
    nu: np.ndarray           # raw row multipliers, padded (N, m+n)
    mu: np.ndarray           # multipliers of the original constraints, NaN where inactive


@dataclass
class NasResult:
    U: np.ndarray
    Z: np.ndarray
    cost: float
    iterations: int
    reason: str
    active: ActiveSet
    trace: list = field(default_factory=list)      # (cost, max residual) after each iteration, index 0 = start
    multipliers: Optional[np.ndarray] = None


def build_local_qp(U, Z, inst: FtocpInstance, finitediff: float = 1e-6) -> LocalQp:
    U = np.ascontiguousarray(U, dtype=np.float64).reshape(inst.N, inst.model.m)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    A, B = linearize_trajectory(inst.model, Z, U, inst.integrator, finitediff)
    N, n, m = inst.N, inst.model.n, inst.model.m
    e = np.empty((N, m))
    f = np.empty((N, n))
    hu = np.empty((N, m))
    hz = np.empty((N, n))
    _costs.gradient_and_curvature(Z, U, *inst.cost_args(), QP_REGULARIZATION, e, f, hu, hz)
    return LocalQp(A, B, e, f, hu, hz)


def reduced_gradient(qp: LocalQp) -> np.ndarray:
    """Gradient of the cost w.r.t. U through the linearized dynamics (adjoint recursion)."""
    N = qp.N
    lam = np.zeros(qp.f.shape[1])
    grad = np.empty_like(qp.e)
    for k in range(N - 1, -1, -1):
        lam = qp.f[k] + (qp.A[k + 1].T @ lam if k + 1 < N else 0.0)
        grad[k] = qp.e[k] + qp.B[k].T @ lam
    return grad


def solve_kkt(qp: LocalQp, act: ActiveSet, maxiterref: int = 1, ws: KktWorkspace | None = None,
              t_s: float = 1.0) -> KktSolution:
    rtype = act.row_types()
    xi, nu, ws = solve_structured(rtype, qp.A, qp.B, qp.h, qp.g, maxiterref, ws)
    m = qp.B.shape[2]
    Ud = clean_direction(xi[:, :m], act)
    Zd = qp.propagate(Ud)
    mu = constraint_multipliers(nu, act, t_s)
    return KktSolution(Ud, Zd, xi.copy(), nu.copy(), mu)


# -- line search ---------------------------------------------------------------

@dataclass
class LineSearchResult:
    alpha: float
    cost: float
    armijo: bool
    trials: list             # [(alpha, cost), ...] in examination order


def backtracking(cost_fn: Callable[[float], float], J0: float, slope: float, alpha_max: float = 1.0,
                 backtrack: float = 0.5, decrease: float = 1e-4, max_trials: int = 30) -> LineSearchResult:
    """Geometric backtracking from alpha_max until the Armijo condition holds.

    Returns the best examined step (lowest cost), which need not be the last.
    """
    trials = []
    best_a, best_J = 0.0, J0
    alpha = alpha_max
    armijo = False
    for _ in range(max_trials):
        J = cost_fn(alpha)
        trials.append((alpha, J))
        if J < best_J:
            best_a, best_J = alpha, J
        if J - J0 <= decrease * alpha * slope:
            armijo = True
            break
        alpha *= backtrack
    return LineSearchResult(best_a, best_J, armijo, trials)


def max_step(U, Ud, inst: FtocpInstance, act: ActiveSet) -> tuple[float, Optional[int]]:
    """Largest alpha in [0, 1] keeping U + alpha*Ud feasible, and the lowest-id blocking constraint."""
    g = constraint_values(U, inst)
    dg = constraint_gradient(Ud, inst)
    cand = (~act.flags) & (dg > 0)
    if not np.any(cand):
        return 1.0, None
    ids = np.flatnonzero(cand)
    slack = -g[ids]
    steps = np.where(slack > FEASIBILITY_TOL, slack, 0.0) / dg[ids]
    i = int(np.argmin(steps))              # first minimum = lowest id
    if steps[i] >= 1.0:
        return 1.0, None
    return float(steps[i]), int(ids[i])


def line_search(U, Ud, inst: FtocpInstance, cfg: NasConfig, slope: float, J0: Optional[float] = None,
                act: Optional[ActiveSet] = None) -> tuple[float, Optional[int], list]:
    """Backtracking on the true (simulated) cost along Ud, starting at the feasible maximum step.

    Returns (alpha, blocking constraint id or None, trials). Raises NoDecrease
    when no examined step lowers the cost.
    """
    U = np.asarray(U, dtype=np.float64).reshape(inst.N, inst.model.m)
    Ud = np.asarray(Ud, dtype=np.float64).reshape(U.shape)
    if act is None:
        act = ActiveSet.from_residuals(constraint_values(U, inst), inst.N, inst.model.m)
    if J0 is None:
        J0 = _safe_cost(U, inst)[0]
    amax, blocking = max_step(U, Ud, inst, act)
    res = backtracking(lambda a: _safe_cost(project_feasible(U + a * Ud, inst), inst)[0], J0, slope,
                       amax, cfg.backtrack, cfg.decrease, cfg.maxlsit)
    if not res.cost < J0:
        raise NoDecrease("no examined step size decreased the cost")
    return res.alpha, blocking, res.trials


def _safe_cost(U, inst):
    try:
        J, Z = simulate_cost(U, inst)
    except NasMpcError:
        return math.inf, None
    return (J, Z) if math.isfinite(J) else (math.inf, None)


def _land_on(U, hit, inst):
    """Put the hit constraint exactly on its boundary (removes rounding left by the step)."""
    kind, k, j, side = describe_constraint(hit, inst.N, inst.model.m)
    c = inst.constraints
    if kind == "bound":
        U[k, j] = inst.hi[k, j] if side > 0 else inst.lo[k, j]
    else:
        U[k, j] = U[k - 1, j] + inst.t_s * (c.du_max[j] if side > 0 else c.du_min[j])


# -- main loop -------------------------------------------------------------------

def warm_start(prev, inst: FtocpInstance) -> np.ndarray:
    """Shifted previous solution (last input repeated), projected onto the current feasible set; zeros without one."""
    N, m = inst.N, inst.model.m
    if prev is None:
        U0 = np.zeros((N, m))
    else:
        Up = np.asarray(prev.U if isinstance(prev, NasResult) else prev, dtype=np.float64).reshape(-1, m)
        if Up.shape[0] == 0 or not np.all(np.isfinite(Up)):
            U0 = np.zeros((N, m))
        else:
            shifted = np.vstack([Up[1:], Up[-1:]]) if Up.shape[0] > 1 else Up.copy()
            if shifted.shape[0] >= N:
                U0 = shifted[:N].copy()
            else:
                U0 = np.vstack([shifted, np.repeat(shifted[-1:], N - shifted.shape[0], axis=0)])
    return project_feasible(U0, inst)


class _Search:
    """Line search with in-iteration projections for one NAS iteration."""

    def __init__(self, inst, cfg, qp, act):
        self.inst, self.cfg, self.qp = inst, cfg, qp
        self.act = act.copy()
        self.hits = []

    def run(self, U, J, Z, Ud, Zd):
        inst, cfg, qp = self.inst, self.cfg, self.qp
        Uacc = np.zeros_like(Ud)
        Zacc = np.zeros_like(Zd)
        nproj = 0
        while True:
            slope = qp.slope(Ud, Zd, Uacc, Zacc)
            if not slope < 0.0 or not np.any(Ud):
                break
            amax, hit = max_step(U, Ud, inst, self.act)
            if hit is not None and amax <= 0.0:
                if nproj >= cfg.maxproj:
                    break
                Ud = project_direction(Ud, hit, self.act)
                self._add(hit)
                Zd = qp.propagate(Ud)
                nproj += 1
                continue
            cache = {}

            def trial(alpha, first=amax):
                Ut = U + alpha * Ud
                if hit is not None and alpha == first:
                    _land_on(Ut, hit, inst)
                Ut = project_feasible(Ut, inst)
                Jt, Zt = _safe_cost(Ut, inst)
                cache[alpha] = (Ut, Zt)
                return Jt

            res = backtracking(trial, J, slope, amax, cfg.backtrack, cfg.decrease, cfg.maxlsit)
            first_ok = res.armijo and len(res.trials) == 1
            if hit is not None and first_ok and nproj < cfg.maxproj:
                U, Z = cache[amax]
                J = res.trials[0][1]
                Uacc += amax * Ud
                Zacc += amax * Zd
                Ud = project_direction((1.0 - amax) * Ud, hit, self.act)
                self._add(hit)
                Zd = qp.propagate(Ud)
                nproj += 1
                continue
            if res.cost < J:
                U, Z = cache[res.alpha]
                J = res.cost
            break
        return U, J, Z

    def _add(self, hit):
        self.act.add(hit)
        self.hits.append(hit)


def nas_solve(inst: FtocpInstance, U0, cfg: NasConfig = NasConfig(), ws: KktWorkspace | None = None,
              callback: Optional[Callable] = None) -> NasResult:
    """Run NAS iterations from the feasible start U0.

    Every accepted iterate is feasible and the cost never increases. The loop
    ends when the local QP gives a zero step and no multiplier is negative
    ("kkt"), after cfg.maxit iterations ("maxit"), or when an iteration
    neither lowers the cost nor changes the active set ("no-progress").
    Internal failures end the loop with the best iterate found ("failure").
    """
    N, m = inst.N, inst.model.m
    U = np.array(U0, dtype=np.float64).reshape(N, m)
    U = project_feasible(U, inst)
    J, Z = simulate_cost(U, inst)
    act = ActiveSet.from_residuals(constraint_values(U, inst), N, m, FEASIBILITY_TOL)
    trace = [(J, float(np.max(constraint_values(U, inst))))]
    reason = "maxit"
    mu = None
    it = 0
    while it < cfg.maxit:
        it += 1
        try:
            qp = build_local_qp(U, Z, inst, cfg.finitediff)
            sol = solve_kkt(qp, act, cfg.maxiterref, ws, inst.t_s)
        except NasMpcError:
            reason = "failure"
            break
        mu = sol.mu
        act_new, released = release_constraints(mu, act, cfg.dualtol)
        step_size = float(np.max(np.abs(sol.Ud)))
        predicted = -qp.slope(sol.Ud, sol.Zd)
        if step_size <= cfg.steptol * (1.0 + float(np.max(np.abs(U)))) or predicted <= cfg.opttol * (1.0 + abs(J)):
            if not released:
                reason = "kkt"
                trace.append((J, trace[-1][1]))
                break
            act = act_new
            trace.append((J, trace[-1][1]))
            if callback:
                callback(it, U, J, act)
            continue
        search = _Search(inst, cfg, qp, act)
        U_new, J_new, Z_new = search.run(U, J, Z, sol.Ud, sol.Zd)
        act_after = search.act
        for l in released:
            if l not in search.hits:
                act_after.remove(l)
        progressed = J_new < J
        if progressed:
            U, J, Z = U_new, J_new, Z_new
        elif search.hits:
            # a zero-length projection can still change the face; keep U
            pass
        changed = act_after != act
        act = act_after
        # drop constraints that the accepted point no longer touches
        g = constraint_values(U, inst)
        stale = act.flags & (g < -FEASIBILITY_TOL)
        if np.any(stale):
            act.flags[stale] = False
        trace.append((J, float(np.max(g))))
        if callback:
            callback(it, U, J, act)
        if not progressed and not changed:
            reason = "no-progress"
            break
    return NasResult(U, Z, J, it, reason, act, trace, mu)
