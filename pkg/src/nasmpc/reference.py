"""Reference paths and trajectories: data model, localization and horizon reference generation.

A trajectory is a root pose (X, Y, Phi) plus S straight segments. Segment ``i``
(0-based here) runs from node ``i-1`` to node ``i``; node ``-1`` is the root,
which is the origin of the local frame. All indices in this module are 0-based.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import BadPtype, BadSegmentCount, NegativeRefSpeed, NoMatch, NonFiniteField, TrajectoryError

log = logging.getLogger(__name__)

HEADER_FIELDS = ("T", "X", "Y", "Phi", "Ptype", "S")
SEGMENT_FIELDS = ("t", "x", "y", "phi", "v", "a", "delta", "beta", "D", "d_left", "d_right")
REF_FIELDS = ("x", "y", "phi", "v", "a", "delta", "beta", "d_left", "d_right")
N_HEADER = len(HEADER_FIELDS)
N_SEGMENT = len(SEGMENT_FIELDS)

TRAJECTORY, REGULAR_PATH, CIRCULAR_PATH = 0, 1, 2
STANDSTILL, FORWARD, REVERSE = 0, 1, 2

(C_T, C_X, C_Y, C_PHI, C_V, C_A, C_DELTA, C_BETA, C_D, C_DLEFT, C_DRIGHT) = range(N_SEGMENT)

PHI_CHECK_TOL = 1e-6


@dataclass(frozen=True)
class TrajectoryHeader:
    T: float
    X: float
    Y: float
    Phi: float
    Ptype: int
    S: int


class Trajectory:
    """Validated, immutable trajectory. ``segments`` is an (S, 11) array in wire column order."""

    def __init__(self, header: TrajectoryHeader, segments: np.ndarray, s_max: int):
        segments = np.array(segments, dtype=np.float64)
        segments.setflags(write=False)
        self.header = header
        self.segments = segments
        self.s_max = int(s_max)
        ends = segments[:, C_X:C_Y + 1]
        starts = np.vstack([np.zeros((1, 2)), ends[:-1]])
        diff = ends - starts
        lengths = np.hypot(diff[:, 0], diff[:, 1])
        self.starts = starts
        self.ends = ends
        self.lengths = lengths
        # arc-length position of each node, node -1 (root) first
        self.node_arc = np.concatenate([[0.0], np.cumsum(lengths)])
        self.node_time = np.concatenate([[0.0], segments[:, C_T]])
        self.modes = segments[:, C_D].astype(np.int64)
        for arr in (self.starts, self.ends, self.lengths, self.node_arc, self.node_time, self.modes):
            arr.setflags(write=False)

    @property
    def S(self) -> int:
        return self.header.S

    @property
    def ptype(self) -> int:
        return self.header.Ptype

    @property
    def total_length(self) -> float:
        return float(self.node_arc[-1])

    def column(self, name: str) -> np.ndarray:
        return self.segments[:, SEGMENT_FIELDS.index(name)]

    def to_flat(self, s_max: Optional[int] = None, fill: float = 0.0) -> np.ndarray:
        s_max = self.s_max if s_max is None else s_max
        if s_max < self.S:
            raise BadSegmentCount(f"cannot pack {self.S} segments into S_max={s_max}")
        h = self.header
        out = np.full(N_HEADER + N_SEGMENT * s_max, fill, dtype=np.float64)
        out[:N_HEADER] = (h.T, h.X, h.Y, h.Phi, h.Ptype, h.S)
        out[N_HEADER:N_HEADER + N_SEGMENT * self.S] = self.segments.ravel()
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        h = self.header
        buf.write("# " + ",".join(HEADER_FIELDS) + "\n")
        buf.write(",".join(repr(float(v)) for v in (h.T, h.X, h.Y, h.Phi)) + f",{h.Ptype},{h.S}\n")
        buf.write("# " + ",".join(SEGMENT_FIELDS) + "\n")
        for row in self.segments:
            vals = [repr(float(v)) for v in row]
            vals[C_D] = str(int(row[C_D]))
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.segments, other.segments)

    def __repr__(self):
        h = self.header
        return f"Trajectory(T={h.T}, Ptype={h.Ptype}, S={h.S}, root=({h.X}, {h.Y}, {h.Phi}))"


def _as_int(value, what):
    r = round(float(value))
    if abs(r - value) > 1e-9:
        log.warning("%s=%r is not integral; rounded to %d", what, value, r)
    return int(r)


def validate_trajectory(raw: Sequence[float], s_max: Optional[int] = None) -> Trajectory:
    """Parse the flat wire array (6 + 11*S_max floats) into a :class:`Trajectory`."""
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if s_max is None:
        if (raw.size - N_HEADER) % N_SEGMENT or raw.size < N_HEADER + N_SEGMENT:
            raise TrajectoryError(f"array length {raw.size} is not 6 + 11*S_max")
        s_max = (raw.size - N_HEADER) // N_SEGMENT
    elif raw.size != N_HEADER + N_SEGMENT * s_max:
        raise TrajectoryError(f"array length {raw.size} does not match 6 + 11*{s_max}")
    head = raw[:N_HEADER]
    if not np.all(np.isfinite(head)):
        bad = [HEADER_FIELDS[i] for i in np.flatnonzero(~np.isfinite(head))]
        raise NonFiniteField(f"non-finite header field(s): {', '.join(bad)}")
    ptype = _as_int(head[4], "Ptype")
    if ptype not in (TRAJECTORY, REGULAR_PATH, CIRCULAR_PATH):
        raise BadPtype(f"Ptype must be 0, 1 or 2, got {head[4]!r}")
    S = _as_int(head[5], "S")
    if not 1 <= S <= s_max:
        raise BadSegmentCount(f"segment count must satisfy 1 <= S <= {s_max}, got {head[5]!r}")
    seg = raw[N_HEADER:N_HEADER + N_SEGMENT * S].reshape(S, N_SEGMENT).copy()
    if not np.all(np.isfinite(seg)):
        i, j = np.argwhere(~np.isfinite(seg))[0]
        raise NonFiniteField(f"segment {i}: field {SEGMENT_FIELDS[j]} is not finite")
    neg = np.flatnonzero(seg[:, C_V] < 0)
    if neg.size:
        raise NegativeRefSpeed(f"segment {neg[0]}: v_ref={seg[neg[0], C_V]!r} < 0")
    for i in range(S):
        d = _as_int(seg[i, C_D], f"segment {i} D")
        if d not in (STANDSTILL, FORWARD, REVERSE):
            raise TrajectoryError(f"segment {i}: driving mode must be 0, 1 or 2, got {seg[i, C_D]!r}")
        seg[i, C_D] = d
    header = TrajectoryHeader(float(head[0]), float(head[1]), float(head[2]), float(head[3]), ptype, S)
    traj = Trajectory(header, seg, s_max)
    _check_angles(traj)
    return traj


def _check_angles(traj: Trajectory) -> None:
    d = traj.ends - traj.starts
    for i in np.flatnonzero(traj.lengths > 1e-9):
        ang = math.atan2(d[i, 1], d[i, 0])
        err = math.remainder(traj.segments[i, C_PHI] - ang, 2 * math.pi)
        # a reverse segment may carry either the geometric angle or the vehicle heading
        err_rev = math.remainder(err - math.pi, 2 * math.pi)
        if min(abs(err), abs(err_rev)) > PHI_CHECK_TOL:
            log.warning("segment %d: phi=%.6f differs from node geometry %.6f", i, traj.segments[i, C_PHI], ang)


def make_trajectory(segments, *, T=0.0, X=0.0, Y=0.0, Phi=0.0, Ptype=REGULAR_PATH, s_max=None) -> Trajectory:
    """Convenience constructor from an (S, 11) segment table; runs full validation."""
    seg = np.asarray(segments, dtype=np.float64).reshape(-1, N_SEGMENT)
    S = seg.shape[0]
    s_max = S if s_max is None else s_max
    raw = np.zeros(N_HEADER + N_SEGMENT * s_max)
    raw[:N_HEADER] = (T, X, Y, Phi, Ptype, S)
    raw[N_HEADER:N_HEADER + N_SEGMENT * S] = seg.ravel()
    return validate_trajectory(raw, s_max)


def trajectory_from_csv(text: str, s_max: Optional[int] = None) -> Trajectory:
    rows = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise TrajectoryError("empty trajectory file")
    head = [float(v) for v in rows[0].split(",")]
    if len(head) != N_HEADER:
        raise TrajectoryError(f"header line must have {N_HEADER} values")
    seg = [[float(v) for v in r.split(",")] for r in rows[1:]]
    if any(len(r) != N_SEGMENT for r in seg):
        raise TrajectoryError(f"segment lines must have {N_SEGMENT} values")
    s_max = max(len(seg), 1) if s_max is None else s_max
    raw = np.zeros(N_HEADER + N_SEGMENT * s_max)
    raw[:N_HEADER] = head
    if len(seg) > s_max:
        raise BadSegmentCount(f"{len(seg)} segments exceed S_max={s_max}")
    if seg:
        raw[N_HEADER:N_HEADER + N_SEGMENT * len(seg)] = np.ravel(seg)
    return validate_trajectory(raw, s_max)


# -- frames --------------------------------------------------------------------

def to_local(traj: Trajectory, point) -> np.ndarray:
    h = traj.header
    dx, dy = point[0] - h.X, point[1] - h.Y
    c, s = math.cos(h.Phi), math.sin(h.Phi)
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def to_global(traj: Trajectory, point) -> np.ndarray:
    h = traj.header
    c, s = math.cos(h.Phi), math.sin(h.Phi)
    return np.array([h.X + c * point[0] - s * point[1], h.Y + s * point[0] + c * point[1]])


# -- localization --------------------------------------------------------------

@dataclass(frozen=True)
class Localization:
    seg: int
    s: float
    dist: float
    lagging_time: float = 0.0
    lag_distance: float = 0.0

    def arc(self, traj: Trajectory) -> float:
        return float(traj.node_arc[self.seg] + self.s)


def project_on_segment(traj: Trajectory, i: int, pos) -> tuple[float, float]:
    """(s, dist) of the closest point of segment i to the local point pos."""
    p0 = traj.starts[i]
    L = traj.lengths[i]
    if L <= 0.0:
        return 0.0, math.hypot(pos[0] - p0[0], pos[1] - p0[1])
    ux = (traj.ends[i, 0] - p0[0]) / L
    uy = (traj.ends[i, 1] - p0[1]) / L
    s = (pos[0] - p0[0]) * ux + (pos[1] - p0[1]) * uy
    s = min(max(s, 0.0), L)
    return s, math.hypot(p0[0] + s * ux - pos[0], p0[1] + s * uy - pos[1])


def point_at(traj: Trajectory, i: int, s: float) -> np.ndarray:
    L = traj.lengths[i]
    if L <= 0.0:
        return traj.ends[i].copy()
    w = s / L
    return (1.0 - w) * traj.starts[i] + w * traj.ends[i]


def localize(traj: Trajectory, pos, prev: Optional[Localization] = None, segsearch: int = 5,
             mode_filter: Optional[int] = None, now: Optional[float] = None) -> Localization:
    """Windowed closest-point search on the polyline.

    The scan starts ``segsearch`` segments behind the previous localization
    (or at the first segment) and walks forward; it stops once ``segsearch``
    consecutive examined segments fail to improve the minimum distance. With
    ``mode_filter`` set, segments with a different driving mode are skipped
    and do not count towards that limit.
    """
    if segsearch < 1:
        raise ValueError("segsearch must be at least 1")
    S = traj.S
    circular = traj.ptype == CIRCULAR_PATH
    if prev is None:
        i = 0
    elif circular:
        i = (prev.seg - segsearch) % S
    else:
        i = max(0, prev.seg - segsearch)
    best = None
    since = 0
    for _ in range(S):
        if mode_filter is None or traj.modes[i] == mode_filter:
            s, d = project_on_segment(traj, i, pos)
            if best is None or d < best[2]:
                best = (i, s, d)
                since = 0
            else:
                since += 1
                if since >= segsearch:
                    break
        i += 1
        if i == S:
            if not circular:
                break
            i = 0
    if best is None:
        raise NoMatch(f"no segment with driving mode {mode_filter} in the search window")
    seg, s, d = best
    lag_t = lag_s = 0.0
    if traj.ptype == TRAJECTORY and now is not None:
        arc = traj.node_arc[seg] + s
        t_rel = now - traj.header.T
        lag_s = float(np.interp(t_rel, traj.node_time, traj.node_arc)) - arc
        lag_t = t_rel - float(np.interp(arc, traj.node_arc, traj.node_time))
    return Localization(int(seg), float(s), float(d), lag_t, lag_s)


# -- reference generation ------------------------------------------------------

@dataclass(frozen=True)
class RefPoint:
    x: float
    y: float
    phi: float
    v: float
    a: float
    delta: float
    beta: float
    d_left: float
    d_right: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in REF_FIELDS])


@dataclass(frozen=True)
class ReferenceBlock:
    """Horizon references k=1..N in global coordinates (rows of ``values`` in REF_FIELDS order).

    ``stop`` is set when the march ran into a node it may not pass: a change
    of driving mode (``next_mode`` is the mode after the node) or the end of
    a non-circular path (``is_end``). ``stop_point`` is that node, global.
    """

    values: np.ndarray
    seg: np.ndarray
    frozen: np.ndarray
    stop: bool
    stop_point: Optional[np.ndarray]
    stop_seg: int
    next_mode: Optional[int]
    is_end: bool
    mode: int

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, k) -> RefPoint:
        return RefPoint(*(float(v) for v in self.values[k]))

    @property
    def points(self) -> list[RefPoint]:
        return [self[k] for k in range(len(self))]

    def flat(self) -> np.ndarray:
        return self.values.ravel().copy()


def effective_speed(v: float, lag_s: float, cuptime: float, maxrefvelmod: float) -> float:
    """Catch-up law: linear speed correction lag/cuptime, clamped to a relative band around v."""
    if cuptime <= 0:
        return v
    return min(max(v + lag_s / cuptime, v * (1.0 - maxrefvelmod)), v * (1.0 + maxrefvelmod))


def generate_references(traj: Trajectory, loc: Localization, now: float, N: int, t_s: float,
                        cuptime: float = 1.0, maxrefvelmod: float = 0.0) -> ReferenceBlock:
    """March along the path from the localization point, one step of v_eff*t_s per prediction step."""
    if N < 1:
        raise ValueError("horizon N must be at least 1")
    S = traj.S
    circular = traj.ptype == CIRCULAR_PATH
    lag = loc.lag_distance if traj.ptype == TRAJECTORY else 0.0
    seg = traj.segments
    i, s = loc.seg, loc.s
    mode = int(traj.modes[i])
    values = np.empty((N, 9))
    segs = np.empty(N, dtype=np.int64)
    frozen = np.zeros(N, dtype=bool)
    stop = False
    is_end = False
    next_mode = None
    cos_p, sin_p = math.cos(traj.header.Phi), math.sin(traj.header.Phi)
    X0, Y0, Phi = traj.header.X, traj.header.Y, traj.header.Phi
    for k in range(N):
        if not stop:
            v = seg[i, C_V]
            if traj.ptype == TRAJECTORY:
                v = effective_speed(v, lag, cuptime, maxrefvelmod)
            d = v * t_s
            while s + d > traj.lengths[i]:
                d -= traj.lengths[i] - s
                j = i + 1
                if j == S:
                    if not circular:
                        stop, is_end = True, True
                        break
                    j = 0
                if traj.modes[j] != mode:
                    stop, next_mode = True, int(traj.modes[j])
                    break
                i, s = j, 0.0
            if stop:
                s = traj.lengths[i]
            else:
                s += d
        p = point_at(traj, i, s)
        row = values[k]
        row[0] = X0 + cos_p * p[0] - sin_p * p[1]
        row[1] = Y0 + sin_p * p[0] + cos_p * p[1]
        row[2] = seg[i, C_PHI] + Phi
        row[3] = 0.0 if stop else seg[i, C_V]
        row[4] = 0.0 if stop else seg[i, C_A]
        row[5] = seg[i, C_DELTA]
        row[6] = seg[i, C_BETA]
        row[7] = seg[i, C_DLEFT]
        row[8] = seg[i, C_DRIGHT]
        segs[k] = i
        frozen[k] = stop
    stop_point = to_global(traj, traj.ends[i]) if stop else None
    values.setflags(write=False)
    return ReferenceBlock(values, segs, frozen, stop, stop_point, int(i) if stop else -1, next_mode, is_end, mode)
