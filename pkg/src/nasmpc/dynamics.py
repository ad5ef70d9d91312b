"""Discrete-time propagation of a model ODE and its finite-difference linearization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _tape
from .errors import NewtonDivergence, NonFiniteState
from .model_dsl import ModelSpec

EULER, MIDPOINT, KUTTA3, HEUN3, RK4, IMPLICIT_EULER, TRAPEZOIDAL = range(1, 8)
METHOD_NAMES = {
    EULER: "explicit Euler",
    MIDPOINT: "explicit midpoint",
    KUTTA3: "Kutta third order",
    HEUN3: "Heun third order",
    RK4: "classical Runge-Kutta 4",
    IMPLICIT_EULER: "implicit Euler",
    TRAPEZOIDAL: "implicit trapezoidal",
}
METHOD_ORDER = {EULER: 1, MIDPOINT: 2, KUTTA3: 3, HEUN3: 3, RK4: 4, IMPLICIT_EULER: 1, TRAPEZOIDAL: 2}


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step integration settings.

    ``finitediff`` is the step of the finite-difference Newton Jacobian used by
    the implicit methods (6 and 7); the explicit methods ignore it together
    with ``newtontol`` and ``newtonit``.
    """

    dt: float
    method: int = RK4
    supnds: int = 0
    newtontol: float = 1e-14
    newtonit: int = 10
    finitediff: float = 1e-6

    def __post_init__(self):
        if self.method not in METHOD_NAMES:
            raise ValueError(f"method must be in 1..7, got {self.method}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.supnds < 0:
            raise ValueError("supnds must be non-negative")
        if not self.newtontol > 0 or self.newtonit < 1:
            raise ValueError("newtontol must be positive and newtonit at least 1")
        if not self.finitediff > 0:
            raise ValueError("finitediff must be positive")

    @property
    def substep(self) -> float:
        return self.dt / (1 + self.supnds)

    def kernel_args(self):
        return (float(self.dt), int(self.method), int(self.supnds), float(self.newtontol),
                int(self.newtonit), float(self.finitediff))


def tape_of(model: ModelSpec):
    return (model.ops, model.args, model.consts, model.params, model.stack_size)


def raise_for_status(status: int, where: str = "") -> None:
    if status == _tape.NEWTON_DIVERGED:
        raise NewtonDivergence(f"Newton iteration did not reach newtontol{where}")
    if status == _tape.NON_FINITE:
        raise NonFiniteState(f"integration produced a non-finite state{where}")


def _vec(x, size, what):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (size,):
        raise ValueError(f"{what} must have length {size}, got shape {x.shape}")
    return x


def integrate_step(model: ModelSpec, z, u, cfg: IntegratorConfig) -> np.ndarray:
    """One sampling interval with zero-order-hold input, split into 1+supnds sub-steps."""
    z = _vec(z, model.n, "z")
    u = _vec(u, model.m, "u")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(u))):
        raise NonFiniteState("non-finite state or input passed to integrate_step")
    out = np.empty(model.n)
    status = _tape.integrate(tape_of(model), z, u, *cfg.kernel_args(), out)
    raise_for_status(status)
    return out


def rollout(model: ModelSpec, z0, U, cfg: IntegratorConfig) -> np.ndarray:
    """States z_0..z_N for the input sequence U (shape N x m)."""
    z0 = _vec(z0, model.n, "z0")
    U = np.ascontiguousarray(U, dtype=np.float64).reshape(-1, model.m)
    Z = np.empty((U.shape[0] + 1, model.n))
    status, k = _tape.rollout(tape_of(model), z0, U, *cfg.kernel_args(), Z)
    raise_for_status(status, f" at prediction step {k}")
    return Z


def linearize_discrete(model: ModelSpec, z, u, cfg: IntegratorConfig, h: float = 1e-6):
    """Forward-difference Jacobians (A, B) of the discrete map at (z, u)."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    z = _vec(z, model.n, "z")
    u = _vec(u, model.m, "u")
    Z = rollout(model, z, u[None, :], cfg)
    A = np.empty((1, model.n, model.n))
    B = np.empty((1, model.n, model.m))
    status, _ = _tape.linearize_all(tape_of(model), Z, u[None, :], *cfg.kernel_args(), float(h), A, B)
    raise_for_status(status)
    return A[0], B[0]


def linearize_trajectory(model: ModelSpec, Z, U, cfg: IntegratorConfig, h: float):
    """Stage Jacobians A_k, B_k along a rollout Z of U (Z[k+1] must equal f(Z[k], U[k]))."""
    N = U.shape[0]
    A = np.empty((N, model.n, model.n))
    B = np.empty((N, model.n, model.m))
    status, k = _tape.linearize_all(tape_of(model), Z, U, *cfg.kernel_args(), float(h), A, B)
    raise_for_status(status, f" at prediction step {k}")
    return A, B
