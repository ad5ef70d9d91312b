import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nasmpc.errors import CholeskyBreakdown
from nasmpc.ftocp import bound_id, rate_id
from nasmpc.nas import ActiveSet, KktWorkspace, factor_of, solve_structured
from nasmpc.nas.kkt import ROW_ZERO
from nasmpc.nas.solver import LocalQp, solve_kkt

from oracles import dense_kkt, random_active_set, random_local_qp, reduced_rows_dense


def structured(act, A, B, h, g, maxiterref=1):
    xi, nu, ws = solve_structured(act.row_types(), A, B, h, g, maxiterref)
    return xi.copy(), nu.copy(), ws


def test_empty_active_set_single_stage():
    rng = np.random.default_rng(0)
    A, B, h, g = random_local_qp(rng, 1)
    act = ActiveSet(1, 2)
    xi, _, _ = structured(act, A, B, h, g)
    assert np.max(np.abs(xi - dense_kkt(A, B, h, g, act))) <= 1e-10


def test_active_bound_gives_exact_zero():
    rng = np.random.default_rng(1)
    A, B, h, g = random_local_qp(rng, 4)
    act = ActiveSet(4, 2)
    act.add(bound_id(0, 1, +1, 2))
    qp = LocalQp(A, B, g[:, :2], g[:, 2:], h[:, :2], h[:, 2:])
    sol = solve_kkt(qp, act)
    assert sol.Ud[0, 1] == 0.0
    assert abs(sol.xi[0, 1]) <= 1e-14


def test_seeded_instance_seven_rows():
    rng = np.random.default_rng(2)
    A, B, h, g = random_local_qp(rng, 5)
    act = ActiveSet(5, 2)
    for l in (bound_id(0, 0, -1, 2), bound_id(2, 1, 1, 2), bound_id(4, 0, 1, 2)):
        act.add(l)
    for l in (rate_id(1, 1, 1, 5, 2), rate_id(3, 0, -1, 5, 2), rate_id(3, 1, 1, 5, 2), rate_id(4, 1, -1, 5, 2)):
        act.add(l)
    assert len(act) == 7
    xi, _, _ = structured(act, A, B, h, g)
    assert np.max(np.abs(xi - dense_kkt(A, B, h, g, act))) <= 1e-8


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.integers(1, 3), st.floats(0.0, 0.8))
def test_structured_matches_dense(seed, N, m, density):
    rng = np.random.default_rng(seed)
    n = 5
    A, B, h, g = random_local_qp(rng, N, n, m)
    act = random_active_set(rng, N, m, density)
    xi, _, _ = structured(act, A, B, h, g)
    ref = dense_kkt(A, B, h, g, act)
    assert np.max(np.abs(xi - ref)) <= 1e-8 * (1 + np.max(np.abs(ref)))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 10))
def test_kkt_residual(seed, N):
    rng = np.random.default_rng(seed)
    A, B, h, g = random_local_qp(rng, N)
    act = random_active_set(rng, N, 2)
    rtype = act.row_types()
    xi, nu, ws = structured(act, A, B, h, g)
    G = reduced_rows_dense(rtype, A, B)
    p = ws.p
    nu_flat = np.concatenate([nu[k, :p[k]] for k in range(N)])
    x = xi.ravel()
    r1 = h.ravel() * x + g.ravel() + G.T @ nu_flat
    r2 = G @ x
    scale = 1 + np.max(np.abs(g))
    assert np.max(np.abs(r1)) <= 1e-8 * scale
    assert np.max(np.abs(r2)) <= 1e-8 * scale


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 10))
def test_cholesky_factor(seed, N):
    rng = np.random.default_rng(seed)
    A, B, h, g = random_local_qp(rng, N)
    act = random_active_set(rng, N, 2, 0.5)
    rtype = act.row_types()
    _, _, ws = structured(act, A, B, h, g)
    L = factor_of(ws).dense()
    G = reduced_rows_dense(rtype, A, B)
    M = G @ np.diag(1.0 / h.ravel()) @ G.T
    assert np.max(np.abs(L @ L.T - M)) <= 1e-10 * np.max(np.abs(M))
    assert np.all(np.diag(L) > 0)
    assert np.allclose(L, np.tril(L))


def test_rows_per_stage_bounded():
    rng = np.random.default_rng(3)
    for _ in range(50):
        act = random_active_set(rng, 8, 3, 0.9)
        rt = act.row_types()
        assert np.all((rt != 0).sum(axis=1) <= 3)


def test_iterative_refinement_does_not_hurt():
    rng = np.random.default_rng(4)
    A, B, h, g = random_local_qp(rng, 20)
    h[:, 2:] = 1e-10             # zero state weights, regularized
    act = random_active_set(rng, 20, 2)
    ref = dense_kkt(A, B, h, g, act)
    errs = [np.max(np.abs(structured(act, A, B, h, g, it)[0] - ref)) for it in (0, 1, 3)]
    assert errs[2] <= max(errs[0], 1e-8 * (1 + np.max(np.abs(ref))))


def test_breakdown_is_reported():
    rng = np.random.default_rng(5)
    A, B, h, g = random_local_qp(rng, 3)
    h[0, 0] = np.nan
    act = ActiveSet(3, 2)
    with pytest.raises(CholeskyBreakdown):
        structured(act, A, B, h, g)


def test_workspace_reuse():
    rng = np.random.default_rng(6)
    A, B, h, g = random_local_qp(rng, 6)
    ws = KktWorkspace(6, 5, 2)
    act1 = random_active_set(rng, 6, 2)
    act2 = random_active_set(rng, 6, 2)
    x1 = solve_structured(act1.row_types(), A, B, h, g, 1, ws)[0].copy()
    solve_structured(act2.row_types(), A, B, h, g, 1, ws)
    x1b = solve_structured(act1.row_types(), A, B, h, g, 1, ws)[0]
    assert np.array_equal(x1, x1b)


def test_pinned_rows_are_zero_rows():
    act = ActiveSet(3, 2)
    act.add(bound_id(1, 0, -1, 2))
    rt = act.row_types()
    assert rt[1, 0] == ROW_ZERO and rt.sum() == ROW_ZERO


def kkt_time(N, reps=200):
    rng = np.random.default_rng(N)
    A, B, h, g = random_local_qp(rng, N)
    act = random_active_set(rng, N, 2)
    rtype = act.row_types()
    ws = KktWorkspace(N, 5, 2)
    solve_structured(rtype, A, B, h, g, 1, ws)
    best = np.inf
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(reps):
            solve_structured(rtype, A, B, h, g, 1, ws)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def test_linear_scaling():
    t40, t80 = kkt_time(40), kkt_time(80)
    assert t80 <= 2.6 * t40
