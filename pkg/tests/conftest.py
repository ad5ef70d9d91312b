import math

import numpy as np
import pytest
from hypothesis import settings

from nasmpc.dynamics import IntegratorConfig
from nasmpc.ftocp import FtocpInstance, InputConstraints, PenaltyParams, Weights
from nasmpc.model_dsl import builtin_kbm, parse_model

settings.register_profile("nasmpc", max_examples=50, deadline=None)
settings.load_profile("nasmpc")

# five mandatory states, all linear: handy when a closed form is needed
LINEAR_TEXT = """\
states: x, y, phi, v, delta
inputs: a, ddelta
parameters: k=0.5
dot(x)=v;
dot(y)=-k*y;
dot(phi)=-phi;
dot(v)=a;
dot(delta)=ddelta;
"""


@pytest.fixture(scope="session")
def kbm():
    return builtin_kbm()


@pytest.fixture(scope="session")
def linear_model():
    return parse_model(LINEAR_TEXT)


def straight_refs(N, dt, v=5.0, d=2.0, y=0.0):
    """N reference rows along the x axis starting one step ahead of the origin."""
    refs = np.zeros((N, 9))
    refs[:, 0] = v * dt * np.arange(1, N + 1)
    refs[:, 1] = y
    refs[:, 3] = v
    refs[:, 7] = refs[:, 8] = d
    return refs


def random_instance(rng, N, model=None, dt=0.05, method=5):
    """A randomized but well-posed FTOCP around a straight or gently curved reference."""
    model = model or builtin_kbm()
    v = rng.uniform(1.0, 8.0)
    curv = rng.uniform(-0.05, 0.05)
    s = v * dt * np.arange(1, N + 1)
    refs = np.zeros((N, 9))
    if abs(curv) < 1e-6:
        refs[:, 0], refs[:, 2] = s, 0.0
    else:
        R = 1.0 / curv
        refs[:, 0] = R * np.sin(s / R)
        refs[:, 1] = R * (1 - np.cos(s / R))
        refs[:, 2] = s / R
    refs[:, 3] = v + rng.uniform(-1, 1)
    refs[:, 4] = rng.uniform(-0.5, 0.5)
    refs[:, 5] = math.atan(2.843 * curv)
    refs[:, 7] = rng.uniform(0.3, 2.0)
    refs[:, 8] = rng.uniform(0.3, 2.0)
    z0 = np.array([0.0, rng.uniform(-1.5, 1.5), rng.uniform(-0.3, 0.3), v + rng.uniform(-2, 2),
                   rng.uniform(-0.1, 0.1)])
    c = InputConstraints([-rng.uniform(0.5, 4), -rng.uniform(0.1, 0.6)], [rng.uniform(0.5, 3), rng.uniform(0.1, 0.6)],
                         [-rng.uniform(1, 6), -rng.uniform(0.5, 3)], [rng.uniform(1, 6), rng.uniform(0.5, 3)])
    w = Weights(rng.uniform(0.05, 2, 2), [rng.uniform(0.5, 5), rng.uniform(0.5, 5), rng.uniform(0.5, 5),
                                        rng.uniform(0.1, 2), rng.uniform(0, 1)])
    u_prev = np.array([rng.uniform(c.u_min[0], c.u_max[0]), rng.uniform(c.u_min[1], c.u_max[1])])
    return FtocpInstance(model, IntegratorConfig(dt=dt, method=method), refs, w, c,
                         PenaltyParams(rng.uniform(10, 200), rng.uniform(0.05, 0.3)), u_prev, z0)


def random_feasible_inputs(rng, inst):
    """A random sequence inside the bounds and rate windows, built by a forward random walk."""
    c = inst.constraints
    U = np.empty((inst.N, inst.model.m))
    for k in range(inst.N):
        if k == 0:
            lo, hi = inst.lo[0], inst.hi[0]
        else:
            lo = np.maximum(c.u_min, U[k - 1] + inst.t_s * c.du_min)
            hi = np.minimum(c.u_max, U[k - 1] + inst.t_s * c.du_max)
        U[k] = lo + rng.uniform(0, 1, lo.size) * (hi - lo)
        # sometimes sit exactly on a boundary so the start has active constraints
        for j in range(lo.size):
            r = rng.uniform()
            if r < 0.1:
                U[k, j] = lo[j]
            elif r < 0.2:
                U[k, j] = hi[j]
    return U
