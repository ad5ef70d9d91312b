"""numba kernels: postfix tape evaluation and fixed-step Runge-Kutta integration.

Everything here works on plain arrays so that it can be compiled once and
reused for any model. A compiled model is passed around as the tuple
``tape = (ops, args, consts, params, stack_size)``.
"""
import math

import numpy as np
from numba import njit

OP_CONST, OP_STATE, OP_INPUT, OP_PARAM = 0, 1, 2, 3
OP_NEG, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = 4, 5, 6, 7, 8, 9
OP_FUNC1, OP_FUNC2, OP_STORE = 10, 11, 12
BINARY_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}

(F_SIN, F_COS, F_TAN, F_ASIN, F_ACOS, F_ATAN, F_SQRT, F_EXP, F_LOG,
 F_FABS, F_TANH, F_SINH, F_COSH) = range(13)
F_ATAN2, F_POW = 0, 1

OK, NEWTON_DIVERGED, NON_FINITE = 0, 1, 2

_JIT = dict(cache=True, error_model="numpy", nogil=True)


@njit(**_JIT)
def _func1(fid, x):
    if fid == F_SIN:
        return math.sin(x)
    if fid == F_COS:
        return math.cos(x)
    if fid == F_TAN:
        return math.tan(x)
    if fid == F_ASIN:
        return math.asin(x) if -1.0 <= x <= 1.0 else math.nan
    if fid == F_ACOS:
        return math.acos(x) if -1.0 <= x <= 1.0 else math.nan
    if fid == F_ATAN:
        return math.atan(x)
    if fid == F_SQRT:
        return math.sqrt(x) if x >= 0.0 else math.nan
    if fid == F_EXP:
        return math.exp(x)
    if fid == F_LOG:
        if x > 0.0:
            return math.log(x)
        return -math.inf if x == 0.0 else math.nan
    if fid == F_FABS:
        return math.fabs(x)
    if fid == F_TANH:
        return math.tanh(x)
    if fid == F_SINH:
        return math.sinh(x)
    return math.cosh(x)


@njit(**_JIT)
def eval_tape(ops, args, consts, params, z, u, out, stack):
    sp = 0
    for i in range(ops.shape[0]):
        op = ops[i]
        a = args[i]
        if op == OP_CONST:
            stack[sp] = consts[a]
            sp += 1
        elif op == OP_STATE:
            stack[sp] = z[a]
            sp += 1
        elif op == OP_INPUT:
            stack[sp] = u[a]
            sp += 1
        elif op == OP_PARAM:
            stack[sp] = params[a]
            sp += 1
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == OP_STORE:
            sp -= 1
            out[a] = stack[sp]
        elif op == OP_FUNC1:
            stack[sp - 1] = _func1(a, stack[sp - 1])
        else:
            sp -= 1
            lhs = stack[sp - 1]
            rhs = stack[sp]
            if op == OP_ADD:
                r = lhs + rhs
            elif op == OP_SUB:
                r = lhs - rhs
            elif op == OP_MUL:
                r = lhs * rhs
            elif op == OP_DIV:
                r = lhs / rhs
            elif op == OP_POW or (op == OP_FUNC2 and a == F_POW):
                r = lhs ** rhs
            else:
                r = math.atan2(lhs, rhs)
            stack[sp - 1] = r


# Butcher tableaus for the explicit methods 1..5 (strictly lower-triangular a, weights b).
_RK_STAGES = np.array([1, 2, 3, 3, 4], dtype=np.int64)
_RK_A = np.zeros((5, 4, 4))
_RK_B = np.zeros((5, 4))
_RK_B[0, 0] = 1.0                                            # explicit Euler
_RK_A[1, 1, 0] = 0.5
_RK_B[1, :2] = (0.0, 1.0)                                    # midpoint
_RK_A[2, 1, 0] = 0.5
_RK_A[2, 2, 0], _RK_A[2, 2, 1] = -1.0, 2.0
_RK_B[2, :3] = (1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0)             # Kutta third order (Simpson)
_RK_A[3, 1, 0] = 1.0 / 3.0
_RK_A[3, 2, 1] = 2.0 / 3.0
_RK_B[3, :3] = (0.25, 0.0, 0.75)                             # Heun third order
_RK_A[4, 1, 0] = 0.5
_RK_A[4, 2, 1] = 0.5
_RK_A[4, 3, 2] = 1.0
_RK_B[4, :] = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)   # classical RK4


@njit(**_JIT)
def _solve_small(M, rhs, out):
    """Gaussian elimination with partial pivoting; M and rhs are overwritten."""
    n = rhs.shape[0]
    for c in range(n):
        p = c
        best = abs(M[c, c])
        for r in range(c + 1, n):
            if abs(M[r, c]) > best:
                best = abs(M[r, c])
                p = r
        if best == 0.0:
            return False
        if p != c:
            for k in range(n):
                M[c, k], M[p, k] = M[p, k], M[c, k]
            rhs[c], rhs[p] = rhs[p], rhs[c]
        for r in range(c + 1, n):
            f = M[r, c] / M[c, c]
            if f != 0.0:
                for k in range(c, n):
                    M[r, k] -= f * M[c, k]
                rhs[r] -= f * rhs[c]
    for r in range(n - 1, -1, -1):
        s = rhs[r]
        for k in range(r + 1, n):
            s -= M[r, k] * out[k]
        out[r] = s / M[r, r]
    return True


@njit(**_JIT)
def _substep(tape, z, u, h, method, newtontol, newtonit, fdh, out, K, tmp, stack):
    ops, args, consts, params, _ = tape
    n = z.shape[0]
    if method <= 5:
        mi = method - 1
        ns = _RK_STAGES[mi]
        for s in range(ns):
            for i in range(n):
                acc = z[i]
                for j in range(s):
                    acc += h * _RK_A[mi, s, j] * K[j, i]
                tmp[i] = acc
            eval_tape(ops, args, consts, params, tmp, u, K[s], stack)
        for i in range(n):
            acc = 0.0
            for s in range(ns):
                acc += _RK_B[mi, s] * K[s, i]
            out[i] = z[i] + h * acc
        return OK

    # implicit Euler (theta = 1) or trapezoidal rule (theta = 1/2)
    theta = 1.0 if method == 6 else 0.5
    f0 = K[0]
    fw = K[1]
    fp = K[2]
    res = K[3]
    eval_tape(ops, args, consts, params, z, u, f0, stack)
    zscale = 1.0
    for i in range(n):
        out[i] = z[i] + h * f0[i]           # explicit Euler predictor
        zscale = max(zscale, abs(z[i]))
    J = np.empty((n, n))
    delta = np.empty(n)
    for it in range(newtonit + 1):
        eval_tape(ops, args, consts, params, out, u, fw, stack)
        rnorm = 0.0
        for i in range(n):
            res[i] = out[i] - z[i] - h * (theta * fw[i] + (1.0 - theta) * f0[i])
            if not math.isfinite(res[i]):
                return NON_FINITE
            rnorm = max(rnorm, abs(res[i]))
        if rnorm <= newtontol * zscale:
            return OK
        if it == newtonit:
            return NEWTON_DIVERGED
        for j in range(n):
            for i in range(n):
                tmp[i] = out[i]
            tmp[j] += fdh
            eval_tape(ops, args, consts, params, tmp, u, fp, stack)
            for i in range(n):
                J[i, j] = -h * theta * (fp[i] - fw[i]) / fdh
            J[j, j] += 1.0
        for i in range(n):
            res[i] = -res[i]
        if not _solve_small(J, res, delta):
            return NEWTON_DIVERGED
        for i in range(n):
            out[i] += delta[i]
    return NEWTON_DIVERGED


@njit(**_JIT)
def integrate(tape, z, u, dt, method, supnds, newtontol, newtonit, fdh, out):
    n = z.shape[0]
    h = dt / (1 + supnds)
    K = np.empty((4, n))
    tmp = np.empty(n)
    cur = z.copy()
    stack = np.empty(tape[4])
    for _ in range(supnds + 1):
        status = _substep(tape, cur, u, h, method, newtontol, newtonit, fdh, out, K, tmp, stack)
        if status != OK:
            return status
        for i in range(n):
            cur[i] = out[i]
    for i in range(n):
        if not math.isfinite(out[i]):
            return NON_FINITE
    return OK


@njit(**_JIT)
def rollout(tape, z0, U, dt, method, supnds, newtontol, newtonit, fdh, Z):
    """Z[0] = z0, Z[k+1] = f(Z[k], U[k]). Returns (status, failing stage)."""
    N = U.shape[0]
    Z[0] = z0
    for k in range(N):
        status = integrate(tape, Z[k], U[k], dt, method, supnds, newtontol, newtonit, fdh, Z[k + 1])
        if status != OK:
            return status, k
    return OK, -1


@njit(**_JIT)
def linearize_all(tape, Z, U, dt, method, supnds, newtontol, newtonit, fdh, h, A, B):
    """Forward-difference Jacobians of the discrete map at every stage of a rollout."""
    N, m = U.shape
    n = Z.shape[1]
    zp = np.empty(n)
    up = np.empty(m)
    col = np.empty(n)
    for k in range(N):
        base = Z[k + 1]
        for j in range(n):
            for i in range(n):
                zp[i] = Z[k, i]
            zp[j] += h
            status = integrate(tape, zp, U[k], dt, method, supnds, newtontol, newtonit, fdh, col)
            if status != OK:
                return status, k
            for i in range(n):
                A[k, i, j] = (col[i] - base[i]) / h
        for j in range(m):
            for i in range(m):
                up[i] = U[k, i]
            up[j] += h
            status = integrate(tape, Z[k], up, dt, method, supnds, newtontol, newtonit, fdh, col)
            if status != OK:
                return status, k
            for i in range(n):
                B[k, i, j] = (col[i] - base[i]) / h
    return OK, -1


@njit(**_JIT)
def propagate(A, B, Ud, Zd):
    """Linearised state response: Zd[k] = dz_{k+1} = A_k dz_k + B_k du_k with dz_0 = 0."""
    N, n, m = B.shape
    for k in range(N):
        for i in range(n):
            acc = 0.0
            for j in range(m):
                acc += B[k, i, j] * Ud[k, j]
            if k > 0:
                for j in range(n):
                    acc += A[k, i, j] * Zd[k - 1, j]
            Zd[k, i] = acc
