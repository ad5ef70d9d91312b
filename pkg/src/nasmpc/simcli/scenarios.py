"""Scenario generators: a circle with four corridor obstacles and a forward/reverse parking maneuver."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..controller import ControllerConfig
from ..ftocp import InputConstraints, Weights
from ..reference import (
    CIRCULAR_PATH,
    FORWARD,
    N_SEGMENT,
    REGULAR_PATH,
    REVERSE,
    STANDSTILL,
    Trajectory,
    C_A,
    C_D,
    C_DELTA,
    C_DLEFT,
    C_DRIGHT,
    C_PHI,
    C_V,
    C_X,
    C_Y,
    make_trajectory,
)

LFLR = 2.843                 # wheelbase of the built-in bicycle model
ARC_RESOLUTION = 0.5         # segment length target for sampled arcs and straights, m
MIN_ARC_SEGMENTS = 6


def default_constraints() -> InputConstraints:
    # a in [-3, 2] m/s^2, steering rate in [-0.5, 0.5] rad/s, jerk +-5 m/s^3, steering accel +-2 rad/s^2
    return InputConstraints([-3.0, -0.5], [2.0, 0.5], [-5.0, -2.0], [5.0, 2.0])


def default_weights() -> Weights:
    return Weights(R=[0.1, 1.0], Q=[1.0, 4.0, 4.0, 0.5, 0.1])


# -- circular path -----------------------------------------------------------------

@dataclass(frozen=True)
class CircularScenario:
    Rad: float = 30.0
    vref: float = 5.0
    alpha: float = math.pi / 12        # angular size of each obstacle
    beta: float = math.pi / 18         # angular size of each transition
    Oin: float = 1.2                   # protrusion of the obstacles passed on the inside
    Oout: float = 1.2                  # protrusion of the obstacles passed on the outside
    pwidth: float = 5.0
    Nn: int = 72
    direction: str = "forward"

    def __post_init__(self):
        if not self.Rad > 0 or self.Nn < 8:
            raise ValueError("need Rad > 0 and Nn >= 8")
        if not (self.alpha > 0 and self.beta > 0 and 4 * (self.alpha + 2 * self.beta) < 2 * math.pi):
            raise ValueError("need alpha, beta > 0 and 4*(alpha + 2*beta) < 2*pi")
        if self.vref < 0 or self.pwidth <= 0 or self.Oin < 0 or self.Oout < 0:
            raise ValueError("vref, Oin, Oout must be non-negative and pwidth positive")
        if max(self.Oin, self.Oout) >= self.pwidth:
            raise ValueError("obstacle protrusion must be smaller than the corridor width")
        if self.direction not in ("forward", "reverse"):
            raise ValueError("direction must be 'forward' or 'reverse'")

    @property
    def obstacles(self) -> tuple:
        """(centre angle, side) per obstacle; side +1 means the vehicle passes on the inside."""
        return tuple((math.pi / 4 + k * math.pi / 2, 1 if k % 2 == 0 else -1) for k in range(4))

    def corridor(self, theta: float) -> tuple[float, float]:
        """(d_inner, d_outer) at polar angle theta; each obstacle pushes its edge in by its protrusion, linear over beta."""
        half = 0.5 * self.pwidth
        d_in, d_out = half, half
        for centre, side in self.obstacles:
            off = abs(math.remainder(theta - centre, 2 * math.pi))
            if off >= 0.5 * self.alpha + self.beta:
                continue
            w = 1.0 if off <= 0.5 * self.alpha else (0.5 * self.alpha + self.beta - off) / self.beta
            # the obstacle narrows the corridor from its own side only
            if side > 0:
                d_out = half - w * self.Oin
            else:
                d_in = half - w * self.Oout
        return d_in, d_out

    def controller_config(self, **kw) -> ControllerConfig:
        kw.setdefault("Nn", self.Nn)
        return ControllerConfig(dt=0.05, Npar=30, **kw)

    def initial_state(self) -> np.ndarray:
        heading = math.pi / 2 if self.direction == "forward" else -math.pi / 2
        v = self.vref if self.direction == "forward" else -self.vref
        delta = math.atan(LFLR / self.Rad) * (1.0 if self.direction == "forward" else -1.0)
        return np.array([self.Rad, 0.0, heading, v, delta])


def scenario_circular(sc: CircularScenario = CircularScenario(), T: float = 0.0) -> Trajectory:
    """Counter-clockwise circle around the origin; the root sits at angle 0, node i (1-based) at 2*pi*i/Nn."""
    Nn = sc.Nn
    theta = 2 * math.pi * np.arange(1, Nn + 1) / Nn
    X0, Y0 = sc.Rad, 0.0
    seg = np.zeros((Nn, N_SEGMENT))
    seg[:, C_X] = sc.Rad * np.cos(theta) - X0
    seg[:, C_Y] = sc.Rad * np.sin(theta) - Y0
    seg[-1, C_X:C_Y + 1] = 0.0         # the last node closes the loop at the root
    prev = np.vstack([[0.0, 0.0], seg[:-1, C_X:C_Y + 1]])
    d = seg[:, C_X:C_Y + 1] - prev
    seg[:, C_PHI] = np.arctan2(d[:, 1], d[:, 0])
    seg[:, C_V] = sc.vref
    forward = sc.direction == "forward"
    seg[:, C_DELTA] = math.atan(LFLR / sc.Rad) * (1.0 if forward else -1.0)
    seg[:, C_D] = FORWARD if forward else REVERSE
    for i in range(Nn):
        d_in, d_out = sc.corridor(theta[i] - math.pi / Nn)
        # left is the centre side when driving counter-clockwise
        seg[i, C_DLEFT], seg[i, C_DRIGHT] = d_in, d_out
    return make_trajectory(seg, T=T, X=X0, Y=Y0, Phi=0.0, Ptype=CIRCULAR_PATH, s_max=max(Nn, 1))


# -- parking -------------------------------------------------------------------------

@dataclass(frozen=True)
class ParkingScenario:
    L1: float = 20.0
    R1: float = 12.0
    R2: float = 12.0
    L2: float = 10.0
    vref: float = 2.0
    pwidth: float = 3.0
    variant: str = "reverse"
    a_acc: float = 2.0               # see with_bounds: taken from the input limits
    a_dec: float = 3.0

    def __post_init__(self):
        if min(self.L1, self.R1, self.R2, self.L2, self.vref, self.pwidth) <= 0:
            raise ValueError("lengths, radii, vref and pwidth must be positive")
        if self.variant not in ("forward", "reverse"):
            raise ValueError("variant must be 'forward' or 'reverse'")
        if not (self.a_acc > 0 and self.a_dec > 0):
            raise ValueError("acceleration limits must be positive")

    @classmethod
    def with_bounds(cls, constraints: InputConstraints, **kw) -> "ParkingScenario":
        return cls(a_acc=float(constraints.u_max[0]), a_dec=float(-constraints.u_min[0]), **kw)

    @property
    def modes(self) -> tuple[int, int]:
        return (FORWARD, REVERSE) if self.variant == "reverse" else (REVERSE, FORWARD)

    def controller_config(self, **kw) -> ControllerConfig:
        # reversing is non-minimum-phase for the centre-of-gravity model; it needs about 3 s of preview
        kw.setdefault("Nn", 200)
        return ControllerConfig(dt=0.1, Npar=30, **kw)

    def initial_state(self) -> np.ndarray:
        heading = 0.0 if self.modes[0] == FORWARD else math.pi
        return np.array([0.0, 0.0, heading, 0.0, 0.0])


def _arc_count(length: float) -> int:
    return max(MIN_ARC_SEGMENTS, math.ceil(length / ARC_RESOLUTION))


def _sample_arc(start, phi0, radius, turn, n):
    """n nodes after start along an arc; turn is the signed heading change (left positive)."""
    sgn = 1.0 if turn > 0 else -1.0
    cx = start[0] - sgn * radius * math.sin(phi0)
    cy = start[1] + sgn * radius * math.cos(phi0)
    phis = phi0 + turn * np.arange(1, n + 1) / n
    x = cx + sgn * radius * np.sin(phis)
    y = cy - sgn * radius * np.cos(phis)
    return np.column_stack([x, y])


def _sample_line(start, phi, length, n):
    t = length * np.arange(1, n + 1) / n
    return np.column_stack([start[0] + t * math.cos(phi), start[1] + t * math.sin(phi)])


def _profile(arc_mid, total, vref, a_acc, a_dec):
    """Trapezoidal speed and acceleration over arc length: ramp up, cruise, ramp down to rest."""
    up = np.sqrt(2 * a_acc * arc_mid)
    down = np.sqrt(2 * a_dec * np.maximum(total - arc_mid, 0.0))
    v = np.minimum(np.minimum(up, down), vref)
    a = np.where(v == up, a_acc, np.where(v == down, -a_dec, 0.0))
    a = np.where(v >= vref, 0.0, a)
    return v, a


def scenario_parking(sc: ParkingScenario = ParkingScenario(), T: float = 0.0) -> Trajectory:
    """Straight L1 and a left arc R1 in the first mode, a standstill node at B, then an arc R2 and a straight L2.

    The second part leaves B backwards along the path direction (turning the
    path direction by +90 deg) and ends on a straight parallel to L1.
    """
    first, second = sc.modes
    # part one
    n1 = max(1, math.ceil(sc.L1 / ARC_RESOLUTION))
    a1 = _arc_count(sc.R1 * math.pi / 2)
    p1 = np.vstack([_sample_line((0.0, 0.0), 0.0, sc.L1, n1),
                    _sample_arc((sc.L1, 0.0), 0.0, sc.R1, math.pi / 2, a1)])
    B = p1[-1]
    # part two, path direction leaves B opposite to the arrival direction
    phi_b = -math.pi / 2
    a2 = _arc_count(sc.R2 * math.pi / 2)
    arc2 = _sample_arc(B, phi_b, sc.R2, math.pi / 2, a2)
    n2 = max(1, math.ceil(sc.L2 / ARC_RESOLUTION))
    p2 = np.vstack([arc2, _sample_line(arc2[-1], 0.0, sc.L2, n2)])

    rows = []

    def add_part(nodes, start, mode):
        prev = np.vstack([start, nodes[:-1]])
        d = nodes - prev
        lengths = np.hypot(d[:, 0], d[:, 1])
        ends = np.cumsum(lengths)
        mid = ends - 0.5 * lengths
        v, a = _profile(mid, ends[-1], sc.vref, sc.a_acc, sc.a_dec)
        phi = np.arctan2(d[:, 1], d[:, 0])
        turn = np.diff(np.concatenate([[phi[0]], phi]))
        for i in range(nodes.shape[0]):
            row = np.zeros(N_SEGMENT)
            row[C_X], row[C_Y] = nodes[i]
            row[C_PHI] = phi[i]
            row[C_V], row[C_A] = v[i], a[i]
            # steering that follows the local curvature of the polyline
            curv = math.remainder(turn[i], 2 * math.pi) / max(lengths[i], 1e-9) if i else 0.0
            if i + 1 < nodes.shape[0]:
                nxt = math.remainder(phi[i + 1] - phi[i], 2 * math.pi) / max(lengths[i], 1e-9)
                curv = 0.5 * (curv + nxt) if i else nxt
            row[C_DELTA] = math.atan(LFLR * curv) * (1.0 if mode == FORWARD else -1.0)
            row[C_D] = mode
            row[C_DLEFT] = row[C_DRIGHT] = 0.5 * sc.pwidth
            rows.append(row)
        return phi[-1]

    phi_end = add_part(p1, np.zeros(2), first)
    stand = np.zeros(N_SEGMENT)
    stand[C_X], stand[C_Y] = B
    stand[C_PHI] = phi_end
    stand[C_DELTA] = rows[-1][C_DELTA]
    stand[C_D] = STANDSTILL
    stand[C_DLEFT] = stand[C_DRIGHT] = 0.5 * sc.pwidth
    rows.append(stand)
    add_part(p2, B, second)
    seg = np.array(rows)
    return make_trajectory(seg, T=T, X=0.0, Y=0.0, Phi=0.0, Ptype=REGULAR_PATH, s_max=seg.shape[0])
