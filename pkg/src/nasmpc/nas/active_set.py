"""Active-set bookkeeping: redundancy-free reduction to QP rows, multiplier recovery, direction projection.

Per input channel the active rate constraints link consecutive stages into
chains. A chain with at least one active bound is pinned: every member gets a
zero row. A chain without bounds moves as one: its first member is free and
every later member gets a tie row to its predecessor. This keeps G at full
row rank with at most m input rows per stage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ftocp import bound_id, describe_constraint, rate_id
from .kkt import ROW_NONE, ROW_TIE, ROW_ZERO


@dataclass(frozen=True)
class Chain:
    j: int
    first: int
    last: int
    bounds: tuple        # ((k, side), ...) active bounds inside the chain
    links: tuple         # side of the active rate at k = first+1..last

    @property
    def pinned(self) -> bool:
        return bool(self.bounds)


class ActiveSet:
    """Membership flags over the (4N-2)m constraint ids of an FTOCP."""

    def __init__(self, N: int, m: int, flags=None):
        self.N = N
        self.m = m
        size = (4 * N - 2) * m
        self.flags = np.zeros(size, dtype=bool) if flags is None else np.array(flags, dtype=bool)
        self._cache_key = None
        if self.flags.size != size:
            raise ValueError(f"expected {size} flags, got {self.flags.size}")
        self._check()

    @classmethod
    def from_residuals(cls, g, N: int, m: int, tol: float = 1e-12) -> "ActiveSet":
        return cls(N, m, np.asarray(g) >= -tol)

    @classmethod
    def from_ids(cls, ids, N: int, m: int) -> "ActiveSet":
        act = cls(N, m)
        for l in ids:
            act.add(l)
        return act

    def _check(self):
        bounds = self.flags[:2 * self.N * self.m].reshape(self.N, 2, self.m)
        if np.any(bounds[:, 0] & bounds[:, 1]):
            raise ValueError("lower and upper bound of the same input cannot both be active")
        if self.N > 1:
            rates = self.flags[2 * self.N * self.m:].reshape(self.N - 1, 2, self.m)
            if np.any(rates[:, 0] & rates[:, 1]):
                raise ValueError("lower and upper rate of the same input cannot both be active")

    def copy(self) -> "ActiveSet":
        return ActiveSet(self.N, self.m, self.flags.copy())

    def add(self, l: int) -> None:
        kind, k, j, side = describe_constraint(l, self.N, self.m)
        other = bound_id(k, j, -side, self.m) if kind == "bound" else rate_id(k, j, -side, self.N, self.m)
        if self.flags[other]:
            raise ValueError(f"constraint {l} conflicts with active constraint {other}")
        self.flags[l] = True

    def remove(self, l: int) -> None:
        self.flags[l] = False

    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def __contains__(self, l) -> bool:
        return bool(self.flags[l])

    def __len__(self) -> int:
        return int(self.flags.sum())

    def __eq__(self, other):
        return isinstance(other, ActiveSet) and np.array_equal(self.flags, other.flags)

    def __repr__(self):
        return f"ActiveSet(N={self.N}, m={self.m}, ids={self.ids().tolist()})"

    def bound_side(self, k: int, j: int) -> int:
        base = k * 2 * self.m + j
        return -1 if self.flags[base] else (1 if self.flags[base + self.m] else 0)

    def rate_side(self, k: int, j: int) -> int:
        """Active rate constraint between stage k-1 and k (k >= 1)."""
        base = 2 * self.N * self.m + (k - 1) * 2 * self.m + j
        return -1 if self.flags[base] else (1 if self.flags[base + self.m] else 0)

    def chains(self) -> list[Chain]:
        """All maximal chains, including the single free stages."""
        return list(self._structure()[0])

    def linked_chains(self) -> list[Chain]:
        """Chains that carry at least one active constraint."""
        return list(self._structure()[1])

    def row_types(self) -> np.ndarray:
        return self._structure()[2].copy()

    def _structure(self):
        # flags may be edited in place, so the cache is keyed on their content
        key = self.flags.tobytes()
        if key != self._cache_key:
            chains = self._build_chains()
            linked = tuple(ch for ch in chains if ch.bounds or ch.links)
            rtype = np.zeros((self.N, self.m), dtype=np.int64)
            for ch in linked:
                if ch.pinned:
                    rtype[ch.first:ch.last + 1, ch.j] = ROW_ZERO
                else:
                    rtype[ch.first + 1:ch.last + 1, ch.j] = ROW_TIE
            self._cache = (chains, linked, rtype)
            self._cache_key = key
        return self._cache

    def _build_chains(self) -> tuple:
        out = []
        N, m = self.N, self.m
        bounds = self.flags[:2 * N * m].reshape(N, 2, m)
        bside = (bounds[:, 1].astype(np.int64) - bounds[:, 0].astype(np.int64)).tolist()
        rside = []
        if N > 1:
            rates = self.flags[2 * N * m:].reshape(N - 1, 2, m)
            rside = (rates[:, 1].astype(np.int64) - rates[:, 0].astype(np.int64)).tolist()
        for j in range(m):
            k = 0
            while k < N:
                first = k
                links = []
                while k + 1 < N and rside[k][j] != 0:
                    links.append(rside[k][j])
                    k += 1
                bnd = tuple((i, bside[i][j]) for i in range(first, k + 1) if bside[i][j] != 0)
                out.append(Chain(j, first, k, bnd, tuple(links)))
                k += 1
        return tuple(out)


def clean_direction(Ud: np.ndarray, act: ActiveSet) -> np.ndarray:
    """Make the direction satisfy the active set exactly: pinned chains zero, free chains at their mean."""
    Ud = np.array(Ud, dtype=np.float64)
    for ch in act.linked_chains():
        sl = slice(ch.first, ch.last + 1)
        if ch.pinned:
            Ud[sl, ch.j] = 0.0
        elif ch.last > ch.first:
            Ud[sl, ch.j] = Ud[sl, ch.j].mean()
    return Ud


def project_direction(Ud: np.ndarray, hit: int, act: ActiveSet) -> np.ndarray:
    """Project a search direction onto a newly hit constraint.

    A bound zeroes its entry; a rate constraint equalizes the two entries at
    their mean (the mean of the merged chain when longer runs are already
    tied), or zeroes them when a bound is active in the merged chain.
    """
    if hit in act:
        raise ValueError(f"constraint {hit} is already active")
    new = act.copy()
    new.add(hit)
    return clean_direction(Ud, new)


def row_multipliers_per_entry(nu: np.ndarray, rtype: np.ndarray) -> np.ndarray:
    """w[k, j]: net multiplier weight that the input rows put on du_k(j)."""
    N, m = rtype.shape
    w = np.zeros((N, m))
    for k in range(N):
        r = 0
        for j in range(m):
            t = rtype[k, j]
            if t == ROW_NONE:
                continue
            w[k, j] += nu[k, r]
            if t == ROW_TIE:
                w[k - 1, j] -= nu[k, r]
            r += 1
    return w


def constraint_multipliers(nu: np.ndarray, act: ActiveSet, t_s: float) -> np.ndarray:
    """Multipliers mu_l >= 0 convention of the original constraints g_l <= 0 (NaN for inactive ids).

    The reduced rows carry the same information as the active constraints;
    for each chain the multipliers of the original constraints are the ones
    reproducing the chain's row weights.
    """
    rtype = act.row_types()
    w = row_multipliers_per_entry(nu, rtype)
    mu = np.full(act.flags.size, np.nan)
    N, m = act.N, act.m
    for ch in act.linked_chains():
        a, b, j = ch.first, ch.last, ch.j
        wc = w[a:b + 1, j]
        # rho_k is the tie weight of the link between stage k-1 and k
        if not ch.bounds:
            rho = {k: nu_tie for k, nu_tie in zip(range(a + 1, b + 1), _tie_values(wc))}
            beta = {}
        elif len(ch.bounds) == 1:
            c = ch.bounds[0][0]
            rho = {}
            for k in range(a + 1, b + 1):
                rho[k] = float(wc[k - a:].sum()) if k > c else -float(wc[:k - a].sum())
            beta = {c: float(wc.sum())}
        else:
            rho, beta = _lstsq_chain(wc, a, b, [k for k, _ in ch.bounds])
        for (k, side) in ch.bounds:
            mu[bound_id(k, j, side, m)] = beta[k] * side
        for k, side in zip(range(a + 1, b + 1), ch.links):
            mu[rate_id(k, j, side, N, m)] = rho[k] * t_s * side
    return mu


def _tie_values(wc):
    # w_first = -rho_{first+1}, w_i = rho_i - rho_{i+1}, w_last = rho_last
    return [float(wc[i:].sum()) for i in range(1, wc.size)]


def _lstsq_chain(wc, a, b, bound_stages):
    size = b - a + 1
    cols = []
    for k in range(a + 1, b + 1):
        col = np.zeros(size)
        col[k - a] = 1.0
        col[k - a - 1] = -1.0
        cols.append(col)
    for k in bound_stages:
        col = np.zeros(size)
        col[k - a] = 1.0
        cols.append(col)
    sol = np.linalg.lstsq(np.array(cols).T, wc, rcond=None)[0]
    nl = b - a
    rho = {k: float(sol[i]) for i, k in enumerate(range(a + 1, b + 1))}
    beta = {k: float(sol[nl + i]) for i, k in enumerate(bound_stages)}
    return rho, beta


def release_constraints(mu: np.ndarray, act: ActiveSet, dualtol: float) -> tuple[ActiveSet, list]:
    """Drop every active constraint whose multiplier is below -dualtol."""
    new = act.copy()
    released = [int(l) for l in act.ids() if mu[l] < -dualtol]
    for l in released:
        new.remove(l)
    return new, released
