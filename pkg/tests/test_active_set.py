import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nasmpc.ftocp import bound_id, describe_constraint, rate_id
from nasmpc.nas import ActiveSet, clean_direction, project_direction, release_constraints
from nasmpc.nas.kkt import ROW_NONE, ROW_TIE, ROW_ZERO
from nasmpc.nas.solver import LocalQp, solve_kkt

from oracles import random_active_set, random_local_qp


def test_size_and_conflicts():
    act = ActiveSet(4, 2)
    assert act.flags.size == (4 * 4 - 2) * 2
    act.add(bound_id(1, 0, -1, 2))
    with pytest.raises(ValueError):
        act.add(bound_id(1, 0, +1, 2))
    act.add(rate_id(2, 1, 1, 4, 2))
    with pytest.raises(ValueError):
        act.add(rate_id(2, 1, -1, 4, 2))
    with pytest.raises(ValueError):
        ActiveSet(4, 2, np.ones(28, dtype=bool))
    with pytest.raises(ValueError):
        ActiveSet(4, 2, np.zeros(10, dtype=bool))


def test_from_residuals_and_ids():
    g = -np.ones(12)
    g[3] = 0.0
    g[7] = -1e-13
    act = ActiveSet.from_residuals(g, 2, 2)
    assert act.ids().tolist() == [3, 7]
    assert ActiveSet.from_ids([3, 7], 2, 2) == act
    act.remove(3)
    assert 3 not in act and len(act) == 1


def test_chains_and_row_types():
    N, m = 6, 1
    act = ActiveSet(N, m)
    # free chain over stages 1..3, pinned chain over 4..5 with an upper bound at 5
    act.add(rate_id(2, 0, 1, N, m))
    act.add(rate_id(3, 0, -1, N, m))
    act.add(rate_id(5, 0, 1, N, m))
    act.add(bound_id(5, 0, 1, m))
    linked = act.linked_chains()
    assert [(c.first, c.last, c.pinned) for c in linked] == [(1, 3, False), (4, 5, True)]
    assert linked[0].links == (1, -1)
    assert len(act.chains()) == 3          # stage 0 is a free singleton
    assert act.row_types()[:, 0].tolist() == [ROW_NONE, ROW_NONE, ROW_TIE, ROW_TIE, ROW_ZERO, ROW_ZERO]
    assert act.bound_side(5, 0) == 1 and act.bound_side(0, 0) == 0
    assert act.rate_side(3, 0) == -1 and act.rate_side(4, 0) == 0


def test_row_types_cache_follows_edits():
    act = ActiveSet(3, 1)
    assert act.row_types().sum() == 0
    act.flags[bound_id(2, 0, 1, 1)] = True
    assert act.row_types()[2, 0] == ROW_ZERO


def test_project_bound_zeroes_entry():
    act = ActiveSet(3, 2)
    Ud = np.array([[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]])
    out = project_direction(Ud, bound_id(2, 1, 1, 2), act)
    assert out[2, 1] == 0.0
    out[2, 1] = 0.6
    assert np.array_equal(out, Ud)


def test_project_rate_equalizes():
    act = ActiveSet(2, 1)
    out = project_direction(np.array([[0.2], [0.6]]), rate_id(1, 0, 1, 2, 1), act)
    assert np.allclose(out.ravel(), [0.4, 0.4], atol=1e-15)


def test_project_rate_with_active_bound():
    act = ActiveSet(2, 1)
    act.add(bound_id(0, 0, -1, 1))
    out = project_direction(np.array([[0.0], [0.6]]), rate_id(1, 0, 1, 2, 1), act)
    assert np.array_equal(out.ravel(), [0.0, 0.0])


def test_project_already_active():
    act = ActiveSet(2, 1)
    act.add(bound_id(1, 0, 1, 1))
    with pytest.raises(ValueError):
        project_direction(np.zeros((2, 1)), bound_id(1, 0, 1, 1), act)


def test_project_merges_chains():
    N = 4
    act = ActiveSet(N, 1)
    act.add(rate_id(1, 0, 1, N, 1))
    out = project_direction(np.array([[1.0], [2.0], [3.0], [6.0]]), rate_id(2, 0, 1, N, 1), act)
    assert np.allclose(out.ravel(), [2.0, 2.0, 2.0, 6.0])


@given(st.integers(0, 2 ** 32 - 1))
def test_clean_direction_satisfies_active_rows(seed):
    rng = np.random.default_rng(seed)
    N, m = 7, 2
    act = random_active_set(rng, N, m, 0.4)
    Ud = clean_direction(rng.normal(size=(N, m)), act)
    for l in act.ids():
        kind, k, j, _ = describe_constraint(int(l), N, m)
        if kind == "bound":
            assert Ud[k, j] == 0.0
        else:
            assert abs(Ud[k, j] - Ud[k - 1, j]) <= 1e-15


def test_release_rule():
    act = ActiveSet.from_ids([0, 2, 4], 2, 1)
    mu = np.full(act.flags.size, np.nan)
    mu[0], mu[2], mu[4] = -1e-6, -1e-10, 0.3
    new, released = release_constraints(mu, act, 1e-8)
    assert released == [0]
    assert new.ids().tolist() == [2, 4]
    assert act.ids().tolist() == [0, 2, 4]


def stationarity_residual(qp, sol, act, t_s):
    """grad of the QP in U-space plus sum mu_l grad g_l at the KKT point."""
    N, m = qp.e.shape
    Zd = qp.propagate(sol.Ud)
    lam = qp.hz * Zd + qp.f
    grad = qp.hu * sol.Ud + qp.e
    for k in range(N):
        for j in range(m):
            E = np.zeros((N, m))
            E[k, j] = 1.0
            grad[k, j] += np.sum(lam * qp.propagate(E))
    for l in act.ids():
        kind, k, j, side = describe_constraint(int(l), N, m)
        if kind == "bound":
            grad[k, j] += sol.mu[l] * side
        else:
            grad[k, j] += sol.mu[l] * side / t_s
            grad[k - 1, j] -= sol.mu[l] * side / t_s
    return grad


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8), st.floats(0.0, 0.7))
def test_multipliers_reproduce_stationarity(seed, N, density):
    """Holds also for redundant active sets, where the multipliers are not unique."""
    rng = np.random.default_rng(seed)
    A, B, h, g = random_local_qp(rng, N)
    qp = LocalQp(A, B, g[:, :2], g[:, 2:], h[:, :2], h[:, 2:])
    act = random_active_set(rng, N, 2, density)
    t_s = 0.05
    sol = solve_kkt(qp, act, t_s=t_s)
    assert np.all(np.isnan(np.delete(sol.mu, act.ids())))
    assert np.all(np.isfinite(sol.mu[act.ids()]))
    res = stationarity_residual(qp, sol, act, t_s)
    assert np.max(np.abs(res)) <= 1e-8 * (1 + np.max(np.abs(g)))


def test_single_bound_multiplier_sign():
    # minimizing (u - 1)^2 / 2 with u <= 0 active: multiplier is +1
    A = np.eye(5)[None]
    B = np.zeros((1, 5, 1))
    qp = LocalQp(A, B, np.array([[-1.0]]), np.zeros((1, 5)), np.ones((1, 1)), np.ones((1, 5)))
    act = ActiveSet.from_ids([bound_id(0, 0, 1, 1)], 1, 1)
    sol = solve_kkt(qp, act, t_s=0.1)
    assert sol.mu[bound_id(0, 0, 1, 1)] == pytest.approx(1.0, abs=1e-12)
    act = ActiveSet.from_ids([bound_id(0, 0, -1, 1)], 1, 1)
    sol = solve_kkt(qp, act, t_s=0.1)
    assert sol.mu[bound_id(0, 0, -1, 1)] == pytest.approx(-1.0, abs=1e-12)
