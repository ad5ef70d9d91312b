"""Independent reference computations used by the tests.

None of these reuse the package's structured algorithms: the KKT oracle is a
dense null-space solve over the original (possibly redundant) active rows,
and the optimality oracle re-implements the bicycle model, RK4 and the cost
in plain numpy and hands the problem to scipy's SLSQP.
"""
import math

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from nasmpc.ftocp import bound_id, describe_constraint, rate_id
from nasmpc.nas import ActiveSet
from nasmpc.nas.kkt import ROW_TIE, ROW_ZERO


def active_rows_dense(act: ActiveSet, N, n, m):
    """Rows of the original active constraints in xi = (du_0, dz_1, ..., du_{N-1}, dz_N) coordinates."""
    P = n + m
    rows = []
    for l in act.ids():
        kind, k, j, _ = describe_constraint(int(l), N, m)
        r = np.zeros(N * P)
        r[k * P + j] = 1.0
        if kind == "rate":
            r[(k - 1) * P + j] = -1.0
        rows.append(r)
    return np.array(rows).reshape(-1, N * P)


def dynamics_rows_dense(A, B):
    N, n, m = B.shape
    P = n + m
    G = np.zeros((N * n, N * P))
    for k in range(N):
        G[k * n:(k + 1) * n, k * P:k * P + m] = B[k]
        G[k * n:(k + 1) * n, k * P + m:(k + 1) * P] = -np.eye(n)
        if k > 0:
            G[k * n:(k + 1) * n, (k - 1) * P + m:k * P] = A[k]
    return G


def dense_kkt(A, B, h, g, act: ActiveSet):
    """Minimizer xi (N, m+n) of 1/2 xi'H xi + g'xi on the null space of all active and dynamics rows."""
    N, n, m = B.shape
    G = np.vstack([active_rows_dense(act, N, n, m), dynamics_rows_dense(A, B)])
    Z = null_space(G)
    H = np.diag(h.ravel())
    y = np.linalg.solve(Z.T @ H @ Z, -Z.T @ g.ravel())
    return (Z @ y).reshape(N, n + m)


def reduced_rows_dense(rtype, A, B):
    """The reduced constraint matrix, rows in the documented stage order, built from the row types."""
    N, n, m = B.shape
    P = n + m
    rows = []
    for k in range(N):
        for j in range(m):
            if rtype[k, j] == ROW_ZERO or rtype[k, j] == ROW_TIE:
                r = np.zeros(N * P)
                r[k * P + j] = 1.0
                if rtype[k, j] == ROW_TIE:
                    r[(k - 1) * P + j] = -1.0
                rows.append(r)
        D = dynamics_rows_dense(A, B)
        rows.extend(D[k * n:(k + 1) * n])
    return np.array(rows)


def random_active_set(rng, N, m, density=0.3) -> ActiveSet:
    """Random membership respecting the lower/upper exclusivity; redundancy is allowed on purpose."""
    act = ActiveSet(N, m)
    for k in range(N):
        for j in range(m):
            if rng.uniform() < density:
                act.add(bound_id(k, j, int(rng.choice([-1, 1])), m))
            if k > 0 and rng.uniform() < density:
                act.add(rate_id(k, j, int(rng.choice([-1, 1])), N, m))
    return act


def random_local_qp(rng, N, n=5, m=2):
    A = np.eye(n) + 0.1 * rng.normal(size=(N, n, n))
    B = 0.1 * rng.normal(size=(N, n, m))
    h = rng.uniform(0.1, 10, (N, m + n))
    g = rng.normal(size=(N, m + n))
    return A, B, h, g


# -- small-scale optimality oracle ------------------------------------------------------

def kbm_rhs(z, u, lflr=2.843, ratio=0.6113):
    beta = np.arctan(ratio * np.tan(z[4]))
    return np.array([z[3] * np.cos(z[2] + beta), z[3] * np.sin(z[2] + beta),
                     z[3] * np.cos(beta) / lflr * np.tan(z[4]), u[0], u[1]])


def rk4_step(z, u, dt, substeps):
    h = dt / substeps
    for _ in range(substeps):
        k1 = kbm_rhs(z, u)
        k2 = kbm_rhs(z + 0.5 * h * k1, u)
        k3 = kbm_rhs(z + 0.5 * h * k2, u)
        k4 = kbm_rhs(z + h * k3, u)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


def _pen(e, lam, tau):
    # branch on the real part so the complex-step derivative goes through
    if e.real <= 0:
        return 0.0 * e
    if e.real < tau:
        return lam * e ** 3 / (3 * tau ** 2)
    return lam * (e - 2 * tau / 3)


def oracle_cost(Uflat, inst):
    """Cost of the FTOCP written from scratch (bicycle model, RK4, path-frame errors, penalty)."""
    N, m = inst.N, inst.model.m
    U = Uflat.reshape(N, m)
    z = np.array(inst.z0, dtype=Uflat.dtype)
    R, Q = inst.weights.R, inst.weights.Q
    lam, tau = inst.penalty.lam, inst.penalty.tau
    sub = 1 + inst.integrator.supnds
    J = 0.0
    for k in range(N):
        z = rk4_step(z, U[k], inst.t_s, sub)
        du = U[k] - inst.uref[k]
        J = J + np.sum(R * du * du)
        phi = inst.refs[k, 2]
        dx, dy = z[0] - inst.zref[k, 0], z[1] - inst.zref[k, 1]
        es = math.cos(phi) * dx + math.sin(phi) * dy
        el = -math.sin(phi) * dx + math.cos(phi) * dy
        dphi = z[2] - inst.zref[k, 2]
        # heading errors stay well inside (-pi, pi] for these instances; wrapping is not differentiable in complex
        J = J + Q[0] * es * es + Q[1] * el * el + Q[2] * dphi * dphi
        J = J + Q[3] * (z[3] - inst.zref[k, 3]) ** 2 + Q[4] * (z[4] - inst.zref[k, 4]) ** 2
        J = J + _pen(el - inst.refs[k, 7], lam, tau) + _pen(-el - inst.refs[k, 8], lam, tau)
    return J


def oracle_gradient(Uflat, inst, h=1e-30):
    """Complex-step gradient: exact to rounding for this analytic (piecewise) cost."""
    g = np.empty_like(Uflat)
    for i in range(Uflat.size):
        Up = Uflat.astype(complex)
        Up[i] += 1j * h
        g[i] = oracle_cost(Up, inst).imag / h
    return g


def oracle_solve(inst, U0):
    """SLSQP on the linear input constraints, tightened to stationarity; returns (U, cost)."""
    N, m = inst.N, inst.model.m
    c = inst.constraints
    lo, hi = np.array(inst.lo).ravel(), np.array(inst.hi).ravel()
    cons = []
    D = np.zeros(((N - 1) * m, N * m))
    for k in range(1, N):
        for j in range(m):
            D[(k - 1) * m + j, k * m + j] = 1.0 / inst.t_s
            D[(k - 1) * m + j, (k - 1) * m + j] = -1.0 / inst.t_s
    if N > 1:
        dmin = np.tile(c.du_min, N - 1)
        dmax = np.tile(c.du_max, N - 1)
        cons.append({"type": "ineq", "fun": lambda x: D @ x - dmin, "jac": lambda x: D})
        cons.append({"type": "ineq", "fun": lambda x: dmax - D @ x, "jac": lambda x: -D})
    res = minimize(lambda x: oracle_cost(x, inst).real, np.ravel(U0), jac=lambda x: oracle_gradient(x, inst),
                   bounds=list(zip(lo, hi)), constraints=cons, method="SLSQP",
                   options={"ftol": 1e-15, "maxiter": 500})
    x = np.clip(res.x, lo, hi)
    return x.reshape(N, m), float(oracle_cost(x, inst).real), res


def _channel_rows(inst, j):
    """Constraints a'x <= b of one input channel; the feasible set factors over channels."""
    N, c = inst.N, inst.constraints
    rows, rhs = [], []
    for k in range(N):
        e = np.zeros(N)
        e[k] = 1.0
        rows += [-e, e]
        rhs += [-inst.lo[k, j], inst.hi[k, j]]
        if k > 0:
            d = e.copy()
            d[k - 1] = -1.0
            rows += [-d, d]
            rhs += [-inst.t_s * c.du_min[j], inst.t_s * c.du_max[j]]
    return np.array(rows), np.array(rhs)


_FACES = {}


def _faces(inst, j):
    """Affine maps x = P y + q onto every face with independent rows, stacked; cached per instance."""
    from itertools import combinations
    key = (id(inst), j)
    if key not in _FACES:
        A, b = _channel_rows(inst, j)
        N = inst.N
        P, q = [np.eye(N)], [np.zeros(N)]
        for size in range(1, N + 1):
            for S in combinations(range(len(b)), size):
                AS = A[list(S)]
                if np.linalg.matrix_rank(AS) < size:
                    continue
                M = AS.T @ np.linalg.inv(AS @ AS.T)
                P.append(np.eye(N) - M @ AS)
                q.append(M @ b[list(S)])
        _FACES[key] = (inst, A, b, np.array(P), np.array(q))
    return _FACES[key][1:]


def exact_projection(U, inst):
    """Euclidean projection onto the feasible inputs by enumerating faces (small N only).

    The candidate of every face with independent rows is the projection onto
    its affine hull; the nearest primal-feasible candidate is the projection.
    """
    out = np.empty((inst.N, inst.model.m))
    for j in range(inst.model.m):
        y = U[:, j]
        A, b, P, q = _faces(inst, j)
        X = P @ y + q
        feas = np.all(X @ A.T <= b + 1e-13, axis=1)
        d = np.where(feas, np.sum((X - y) ** 2, axis=1), np.inf)
        out[:, j] = X[int(np.argmin(d))]
    return out


def stationarity(U, inst):
    """max|P(U - grad) - U| with the exact projection: zero exactly at KKT points."""
    g = oracle_gradient(U.ravel(), inst).reshape(U.shape)
    return float(np.max(np.abs(exact_projection(U - g, inst) - U)))


def _face_newton(U, inst, iters=8, h=1e-6):
    """Newton steps on the face active at U (tangent directions only), exact gradients, FD Hessian."""
    N, m = inst.N, inst.model.m
    rows = []
    for j in range(m):
        A, b = _channel_rows(inst, j)
        for a, r in zip(A, b):
            if a @ U[:, j] >= r - 1e-10:
                full = np.zeros((N, m))
                full[:, j] = a
                rows.append(full.ravel())
    Zb = null_space(np.array(rows)) if rows else np.eye(N * m)
    x = U.ravel().copy()
    for _ in range(iters):
        if Zb.shape[1] == 0:
            break
        g = oracle_gradient(x, inst)
        H = np.empty((x.size, x.size))
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = h
            H[:, i] = (oracle_gradient(x + e, inst) - oracle_gradient(x - e, inst)) / (2 * h)
        Hr = Zb.T @ (0.5 * (H + H.T)) @ Zb
        x = x - Zb @ np.linalg.solve(Hr, Zb.T @ g)
    return x.reshape(N, m)


def projected_gradient_oracle(inst, U0, tol=1e-12, maxit=3000):
    """Projected gradient descent (Barzilai-Borwein steps, Armijo safeguard), Newton-polished on the final face.

    Returns (U, cost, stationarity) with stationarity as in ``stationarity``.
    """
    U = exact_projection(np.asarray(U0, dtype=float).reshape(inst.N, inst.model.m), inst)
    J = oracle_cost(U.ravel(), inst).real
    g = oracle_gradient(U.ravel(), inst).reshape(U.shape)
    step = 1e-2
    stat = np.inf
    for _ in range(maxit):
        stat = float(np.max(np.abs(exact_projection(U - g, inst) - U)))
        if stat <= tol:
            break
        while True:
            Un = exact_projection(U - step * g, inst)
            Jn = oracle_cost(Un.ravel(), inst).real
            if Jn <= J + 1e-4 * np.sum(g * (Un - U)) or step < 1e-14:
                break
            step *= 0.5
        gn = oracle_gradient(Un.ravel(), inst).reshape(U.shape)
        s_, y_ = (Un - U).ravel(), (gn - g).ravel()
        sy = float(s_ @ y_)
        step = float(s_ @ s_) / sy if sy > 0 else 1e-2
        step = min(max(step, 1e-8), 1e3)
        if np.array_equal(Un, U):
            break
        U, J, g = Un, Jn, gn
    if stat > tol:
        # gradient steps crawl on ill-conditioned faces; finish with Newton on the identified face
        Up = _face_newton(U, inst)
        if np.all(np.abs(exact_projection(Up, inst) - Up) <= 1e-13):
            stat_p = stationarity(Up, inst)
            if stat_p < stat:
                U, J, stat = Up, oracle_cost(Up.ravel(), inst).real, stat_p
    return U, float(J), stat
