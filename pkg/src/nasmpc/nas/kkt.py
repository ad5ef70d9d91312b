"""Structured solve of the equality-constrained local QP.

Decision variables are stacked per stage as xi_k = (du_k, dz_{k+1}), k = 0..N-1.
Constraint rows of stage k are the active input rows (channel order) followed
by the n dynamics rows ``B_k du_k - dz_{k+1} + A_k dz_k = 0``. An input row is
either a zero row ``du_k(j) = 0`` or a tie row ``du_k(j) - du_{k-1}(j) = 0``.
With that ordering G is block lower-bidiagonal, so G H^-1 G^T is block
tridiagonal and is factorized by a forward block Cholesky recursion.

The QP is ``min 1/2 xi^T H xi + g^T xi  s.t.  G xi = 0`` with diagonal H; the KKT
system is ``[H G^T; G 0] [xi; nu] = [-g; 0]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..errors import CholeskyBreakdown

ROW_NONE, ROW_ZERO, ROW_TIE = 0, 1, 2

OK, BREAKDOWN = 0, 1

_JIT = dict(cache=True, error_model="numpy", nogil=True)


@njit(**_JIT)
def _assemble_rows(rtype, A, B, Dm, Cm, p):
    """Row blocks of G: Dm[k] multiplies xi_k, Cm[k] multiplies xi_{k-1}."""
    N, n, m = B.shape
    Dm[:] = 0.0
    Cm[:] = 0.0
    for k in range(N):
        r = 0
        for j in range(m):
            t = rtype[k, j]
            if t != ROW_NONE:
                Dm[k, r, j] = 1.0
                if t == ROW_TIE:
                    Cm[k, r, j] = -1.0
                r += 1
        for i in range(n):
            for j in range(m):
                Dm[k, r + i, j] = B[k, i, j]
            Dm[k, r + i, m + i] = -1.0
            if k > 0:
                for j in range(n):
                    Cm[k, r + i, m + j] = A[k, i, j]
        p[k] = r + n


@njit(**_JIT)
def _chol_inplace(S, q):
    """Lower Cholesky factor of the leading q x q block of S, in place; False on a non-positive pivot."""
    for j in range(q):
        d = S[j, j]
        for l in range(j):
            d -= S[j, l] * S[j, l]
        if not d > 0.0:
            return False
        d = math.sqrt(d)
        S[j, j] = d
        for i in range(j + 1, q):
            s = S[i, j]
            for l in range(j):
                s -= S[i, l] * S[j, l]
            S[i, j] = s / d
    for i in range(q):
        for j in range(i + 1, q):
            S[i, j] = 0.0
    return True


@njit(**_JIT)
def factorize(Dm, Cm, p, Hinv, L, Lsub):
    """Block Cholesky of M = G H^-1 G^T: L[k] diagonal blocks, Lsub[k] the block left of L[k]."""
    N = Dm.shape[0]
    nx = Dm.shape[2]
    L[:] = 0.0
    Lsub[:] = 0.0
    for k in range(N):
        pk = p[k]
        S = L[k]
        for r in range(pk):
            for c in range(r + 1):
                acc = 0.0
                for v in range(nx):
                    acc += Dm[k, r, v] * Hinv[k, v] * Dm[k, c, v]
                if k > 0:
                    for v in range(nx):
                        acc += Cm[k, r, v] * Hinv[k - 1, v] * Cm[k, c, v]
                S[r, c] = acc
        if k > 0:
            pp = p[k - 1]
            Lp = L[k - 1]
            for r in range(pk):
                # row r of M_{k,k-1} = Cm_k H_{k-1}^-1 Dm_{k-1}^T, then solve against L_{k-1}^T
                for c in range(pp):
                    acc = 0.0
                    for v in range(nx):
                        acc += Cm[k, r, v] * Hinv[k - 1, v] * Dm[k - 1, c, v]
                    for l in range(c):
                        acc -= Lsub[k, r, l] * Lp[c, l]
                    Lsub[k, r, c] = acc / Lp[c, c]
            for r in range(pk):
                for c in range(r + 1):
                    acc = 0.0
                    for l in range(pp):
                        acc += Lsub[k, r, l] * Lsub[k, c, l]
                    S[r, c] -= acc
        for r in range(pk):
            for c in range(r + 1, pk):
                S[r, c] = S[c, r]
        if not _chol_inplace(S, pk):
            return BREAKDOWN, k
    return OK, -1


@njit(**_JIT)
def _solve_m(L, Lsub, p, b, y):
    """Solve (L L^T) y = b with b, y stored per block (N x P); b is overwritten."""
    N = L.shape[0]
    for k in range(N):
        pk = p[k]
        for r in range(pk):
            s = b[k, r]
            if k > 0:
                for l in range(p[k - 1]):
                    s -= Lsub[k, r, l] * y[k - 1, l]
            for l in range(r):
                s -= L[k, r, l] * y[k, l]
            y[k, r] = s / L[k, r, r]
    for k in range(N - 1, -1, -1):
        pk = p[k]
        for r in range(pk - 1, -1, -1):
            s = y[k, r]
            if k + 1 < N:
                for l in range(p[k + 1]):
                    s -= Lsub[k + 1, l, r] * y[k + 1, l]
            for l in range(r + 1, pk):
                s -= L[k, l, r] * y[k, l]
            y[k, r] = s / L[k, r, r]


@njit(**_JIT)
def _g_times(Dm, Cm, p, x, out):
    N = Dm.shape[0]
    nx = Dm.shape[2]
    for k in range(N):
        for r in range(p[k]):
            acc = 0.0
            for v in range(nx):
                acc += Dm[k, r, v] * x[k, v]
                if k > 0:
                    acc += Cm[k, r, v] * x[k - 1, v]
            out[k, r] = acc


@njit(**_JIT)
def _gt_times(Dm, Cm, p, y, out):
    N = Dm.shape[0]
    nx = Dm.shape[2]
    for k in range(N):
        for v in range(nx):
            acc = 0.0
            for r in range(p[k]):
                acc += Dm[k, r, v] * y[k, r]
            if k + 1 < N:
                for r in range(p[k + 1]):
                    acc += Cm[k + 1, r, v] * y[k + 1, r]
            out[k, v] = acc


@njit(**_JIT)
def _solve_with_factor(Dm, Cm, p, Hinv, L, Lsub, a, c, x, nu, tmp_x, tmp_y):
    """[H G^T; G 0][x; nu] = [a; c] via M nu = G H^-1 a - c, x = H^-1 (a - G^T nu)."""
    N, nx = a.shape
    for k in range(N):
        for v in range(nx):
            tmp_x[k, v] = Hinv[k, v] * a[k, v]
    _g_times(Dm, Cm, p, tmp_x, tmp_y)
    for k in range(N):
        for r in range(p[k]):
            tmp_y[k, r] -= c[k, r]
    _solve_m(L, Lsub, p, tmp_y, nu)
    _gt_times(Dm, Cm, p, nu, tmp_x)
    for k in range(N):
        for v in range(nx):
            x[k, v] = Hinv[k, v] * (a[k, v] - tmp_x[k, v])


@njit(**_JIT)
def kkt_solve(rtype, A, B, h, g, maxiterref, x, nu, Dm, Cm, p, L, Lsub):
    """Solve the local QP KKT system; h, g, x are (N, m+n) stage-stacked. Returns (status, stage)."""
    N, nx = h.shape
    P = Dm.shape[1]
    _assemble_rows(rtype, A, B, Dm, Cm, p)
    Hinv = np.empty((N, nx))
    for k in range(N):
        for v in range(nx):
            Hinv[k, v] = 1.0 / h[k, v]
    status, where = factorize(Dm, Cm, p, Hinv, L, Lsub)
    if status != OK:
        return status, where
    a = np.empty((N, nx))
    for k in range(N):
        for v in range(nx):
            a[k, v] = -g[k, v]
    c = np.zeros((N, P))
    tmp_x = np.empty((N, nx))
    tmp_y = np.empty((N, P))
    _solve_with_factor(Dm, Cm, p, Hinv, L, Lsub, a, c, x, nu, tmp_x, tmp_y)
    if maxiterref > 0:
        dx = np.empty((N, nx))
        dnu = np.zeros((N, P))
        r1 = np.empty((N, nx))
        r2 = np.zeros((N, P))
        for _ in range(maxiterref):
            _gt_times(Dm, Cm, p, nu, tmp_x)
            for k in range(N):
                for v in range(nx):
                    r1[k, v] = -g[k, v] - h[k, v] * x[k, v] - tmp_x[k, v]
            _g_times(Dm, Cm, p, x, r2)
            for k in range(N):
                for r in range(p[k]):
                    r2[k, r] = -r2[k, r]
            _solve_with_factor(Dm, Cm, p, Hinv, L, Lsub, r1, r2, dx, dnu, tmp_x, tmp_y)
            for k in range(N):
                for v in range(nx):
                    x[k, v] += dx[k, v]
                for r in range(p[k]):
                    nu[k, r] += dnu[k, r]
    return OK, -1


@dataclass
class KktWorkspace:
    """Pre-sized buffers for one horizon length; reused across iterations."""

    N: int
    n: int
    m: int

    def __post_init__(self):
        P = self.n + self.m
        self.Dm = np.zeros((self.N, P, P))
        self.Cm = np.zeros((self.N, P, P))
        self.p = np.zeros(self.N, dtype=np.int64)
        self.L = np.zeros((self.N, P, P))
        self.Lsub = np.zeros((self.N, P, P))
        self.x = np.zeros((self.N, P))
        self.nu = np.zeros((self.N, P))


@dataclass
class KktFactor:
    """Block factor of G H^-1 G^T: ``diag[k]`` is p_k x p_k lower triangular, ``sub[k]`` is p_k x p_{k-1}."""

    diag: list
    sub: list
    sizes: np.ndarray

    def dense(self) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum(self.sizes)])
        Lfull = np.zeros((off[-1], off[-1]))
        for k, (Lk, Sk) in enumerate(zip(self.diag, self.sub)):
            Lfull[off[k]:off[k + 1], off[k]:off[k + 1]] = Lk
            if k > 0:
                Lfull[off[k]:off[k + 1], off[k - 1]:off[k]] = Sk
        return Lfull


def solve_structured(rtype, A, B, h, g, maxiterref=1, ws: KktWorkspace | None = None):
    """Returns (xi, nu, ws) with xi (N, m+n) and nu padded (N, m+n); raises CholeskyBreakdown."""
    N, n, m = B.shape
    if ws is None or (ws.N, ws.n, ws.m) != (N, n, m):
        ws = KktWorkspace(N, n, m)
    status, k = kkt_solve(rtype, A, B, h, g, int(maxiterref), ws.x, ws.nu, ws.Dm, ws.Cm, ws.p, ws.L, ws.Lsub)
    if status != OK:
        raise CholeskyBreakdown(f"non-positive pivot in block {k} of G H^-1 G^T")
    return ws.x, ws.nu, ws


def factor_of(ws: KktWorkspace) -> KktFactor:
    p = ws.p.copy()
    diag = [ws.L[k, :p[k], :p[k]].copy() for k in range(ws.N)]
    sub = [ws.Lsub[k, :p[k], :p[k - 1]].copy() if k else np.zeros((p[0], 0)) for k in range(ws.N)]
    return KktFactor(diag, sub, p)

