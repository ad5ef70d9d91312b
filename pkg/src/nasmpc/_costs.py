"""numba kernels for the tracking cost, its gradient and the diagonal QP curvature.

Stage layout: inputs U[k] (k = 0..N-1) pair with references row k, states
Z[k+1] pair with references row k as well. ``zref``/``uref`` hold the per-stage
targets (heading already adjusted for the driving direction), ``phip`` the path
direction used for the error rotation and the corridor.
"""
import math

from numba import njit

_JIT = dict(cache=True, error_model="numpy", nogil=True)


@njit(**_JIT)
def penalty(eps, lam, tau):
    if eps <= 0.0:
        return 0.0
    if eps < tau:
        return lam * eps * eps * eps / (3.0 * tau * tau)
    # lam*(eps - 2 tau/3), written so that eps == tau returns lam*tau/3 bit for bit
    return lam * (eps - tau) + lam * tau / 3.0


@njit(**_JIT)
def penalty_d1(eps, lam, tau):
    if eps <= 0.0:
        return 0.0
    if eps < tau:
        return lam * eps * eps / (tau * tau)
    return lam


@njit(**_JIT)
def penalty_d2(eps, lam, tau):
    if eps <= 0.0 or eps >= tau:
        return 0.0
    return 2.0 * lam * eps / (tau * tau)


@njit(**_JIT)
def wrap(a):
    return math.atan2(math.sin(a), math.cos(a))


@njit(**_JIT)
def total_cost(Z, U, zref, uref, phip, dleft, dright, R, Q, lam, tau):
    N, m = U.shape
    n = Z.shape[1]
    J = 0.0
    for k in range(N):
        for j in range(m):
            d = U[k, j] - uref[k, j]
            J += R[j] * d * d
        z = Z[k + 1]
        c = math.cos(phip[k])
        s = math.sin(phip[k])
        dx = z[0] - zref[k, 0]
        dy = z[1] - zref[k, 1]
        es = c * dx + s * dy
        el = -s * dx + c * dy
        dphi = wrap(z[2] - zref[k, 2])
        J += Q[0] * es * es + Q[1] * el * el + Q[2] * dphi * dphi
        for j in range(3, n):
            d = z[j] - zref[k, j]
            J += Q[j] * d * d
        J += penalty(el - dleft[k], lam, tau) + penalty(-el - dright[k], lam, tau)
    return J


@njit(**_JIT)
def gradient_and_curvature(Z, U, zref, uref, phip, dleft, dright, R, Q, lam, tau, reg, e, f, hu, hz):
    """e, f: cost gradient w.r.t. U[k] and Z[k+1]; hu, hz: diagonal curvature for the local QP."""
    N, m = U.shape
    n = Z.shape[1]
    for k in range(N):
        for j in range(m):
            e[k, j] = 2.0 * R[j] * (U[k, j] - uref[k, j])
            hu[k, j] = 2.0 * R[j]
        z = Z[k + 1]
        c = math.cos(phip[k])
        s = math.sin(phip[k])
        dx = z[0] - zref[k, 0]
        dy = z[1] - zref[k, 1]
        es = c * dx + s * dy
        el = -s * dx + c * dy
        epl = el - dleft[k]
        epr = -el - dright[k]
        gl = 2.0 * Q[1] * el + penalty_d1(epl, lam, tau) - penalty_d1(epr, lam, tau)
        gs = 2.0 * Q[0] * es
        f[k, 0] = c * gs - s * gl
        f[k, 1] = s * gs + c * gl
        pl2 = penalty_d2(epl, lam, tau) + penalty_d2(epr, lam, tau)
        hz[k, 0] = max(2.0 * Q[0] * c * c + (2.0 * Q[1] + pl2) * s * s, reg)
        hz[k, 1] = max(2.0 * Q[0] * s * s + (2.0 * Q[1] + pl2) * c * c, reg)
        f[k, 2] = 2.0 * Q[2] * wrap(z[2] - zref[k, 2])
        hz[k, 2] = max(2.0 * Q[2], reg)
        for j in range(3, n):
            f[k, j] = 2.0 * Q[j] * (z[j] - zref[k, j])
            hz[k, j] = max(2.0 * Q[j], reg)
