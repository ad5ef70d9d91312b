import math

import numpy as np
import pytest

from nasmpc.controller import Controller, ControllerConfig
from nasmpc.dynamics import IntegratorConfig, integrate_step
from nasmpc.ftocp import InputConstraints
from nasmpc.model_dsl import builtin_kbm
from nasmpc.reference import (
    C_D,
    C_DLEFT,
    C_DRIGHT,
    C_PHI,
    C_V,
    C_X,
    C_Y,
    FORWARD,
    N_SEGMENT,
    REVERSE,
    STANDSTILL,
    generate_references,
    make_trajectory,
)

PLANT = IntegratorConfig(dt=0.05, method=5, supnds=9)
WIDE = InputConstraints([-3, -0.5], [3, 0.5], [-6, -2], [6, 2])


def line_trajectory(start, end, v, mode=FORWARD, nseg=10, T=0.0):
    start, end = np.asarray(start, float), np.asarray(end, float)
    pts = start + np.linspace(0, 1, nseg + 1)[:, None] * (end - start)
    seg = np.zeros((nseg, N_SEGMENT))
    seg[:, C_X:C_Y + 1] = pts[1:] - start
    seg[:, C_PHI] = math.atan2(*(end - start)[::-1])
    seg[:, C_V] = v
    seg[:, C_D] = mode
    seg[:, C_DLEFT] = seg[:, C_DRIGHT] = 2.0
    return make_trajectory(seg, T=T, X=start[0], Y=start[1])


def plant_step(kbm, z, u):
    return integrate_step(kbm, z, u, PLANT)


def small_cfg(**kw):
    base = dict(Npar=20, Nn=20)
    base.update(kw)
    return ControllerConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(dt=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(onesteppred=2)
    with pytest.raises(ValueError):
        ControllerConfig(segsearch=0)


def test_timestamp_gating():
    ctrl = Controller(small_cfg())
    first = line_trajectory((0, 0), (50, 0), 2.0, T=1.0)
    assert ctrl.submit_trajectory(first)
    assert not ctrl.submit_trajectory(line_trajectory((0, 0), (0, 50), 2.0, T=0.5))
    assert not ctrl.submit_trajectory(line_trajectory((0, 0), (0, 50), 2.0, T=1.0))
    assert ctrl.state.trajectory is first and ctrl.state.stamp == 1.0
    assert ctrl.submit_trajectory(line_trajectory((0, 0), (0, 50), 2.0, T=1.5))


def test_bad_segment_count_retained():
    ctrl = Controller(small_cfg(Nn=5))
    good = line_trajectory((0, 0), (20, 0), 2.0, nseg=4, T=1.0)
    assert ctrl.submit_trajectory(good.to_flat(5))
    raw = good.to_flat(5)
    raw[0] = 2.0
    raw[5] = 9                       # more segments than S_max
    assert not ctrl.submit_trajectory(raw)
    assert "BadSegmentCount" in ctrl.state.last_error
    assert ctrl.state.trajectory == good and ctrl.state.stamp == 1.0


def test_at_rest_on_forward_path(kbm):
    ctrl = Controller(small_cfg(), constraints=WIDE)
    ctrl.submit_trajectory(line_trajectory((0, 0), (50, 0), 2.0))
    out = ctrl.mpc_step([0, 0, 0, 0, 0])
    assert out.drivmode == FORWARD
    assert np.all(np.isfinite(out.u0)) and out.u0[0] >= 0.0
    assert np.all(out.u0 >= WIDE.u_min) and np.all(out.u0 <= WIDE.u_max)
    assert not out.fault


def test_output_layout(kbm):
    cfg = small_cfg()
    ctrl = Controller(cfg, constraints=WIDE)
    traj = line_trajectory((0, 0), (50, 0), 2.0)
    ctrl.submit_trajectory(traj)
    out = ctrl.mpc_step([0, 0.2, 0.05, 1.0, 0])
    N, n, m = cfg.Npar, 5, 2
    assert out.Useq.size == N * m and out.Ref.size == 9 * N and out.Zseq.size == (N + 1) * n
    flat = out.to_flat()
    assert flat.size == 1 + m + N * m + 9 * N + (N + 1) * n
    assert flat[0] == out.drivmode
    assert np.array_equal(flat[1:1 + m], out.u0)
    assert np.array_equal(out.u0, out.Useq[:m])
    assert np.array_equal(flat[1 + m + N * m:1 + m + N * m + 9 * N], out.Ref)
    block = generate_references(traj, out.localization, 0.0, N, cfg.dt, cfg.cuptime, cfg.maxrefvelmod)
    assert np.array_equal(out.Ref, block.values.ravel())


def test_nan_fault_path(kbm):
    ctrl = Controller(small_cfg(), constraints=WIDE)
    ctrl.submit_trajectory(line_trajectory((0, 0), (80, 0), 3.0))
    z = np.array([0, 0, 0, 3.0, 0])
    out = ctrl.mpc_step(z)
    assert out.drivmode == FORWARD
    u_prev = ctrl.state.u_prev.copy()
    bad = ctrl.mpc_step([np.nan, 0, 0, 3.0, 0])
    lo = np.maximum(WIDE.u_min, u_prev + 0.05 * WIDE.du_min)
    hi = np.minimum(WIDE.u_max, u_prev + 0.05 * WIDE.du_max)
    assert bad.fault and ctrl.state.fault
    assert bad.drivmode == FORWARD
    assert bad.u0[0] == lo[0]                 # strongest braking the rate window allows
    assert np.all(bad.u0 >= lo) and np.all(bad.u0 <= hi)
    again = ctrl.mpc_step(plant_step(kbm, z, bad.u0))
    assert not again.fault and again.drivmode == FORWARD


def test_wrong_size_measurement_faults():
    ctrl = Controller(small_cfg())
    out = ctrl.mpc_step([0, 0, 0])
    assert out.fault and out.drivmode == STANDSTILL
    assert np.all(np.isfinite(out.u0))


def test_reverse_request_while_driving_forward(kbm):
    cfg = small_cfg()
    ctrl = Controller(cfg, constraints=WIDE)
    ctrl.submit_trajectory(line_trajectory((0, 0), (80, 0), 3.0))
    z = np.array([0, 0, 0, 3.0, 0])
    out = ctrl.mpc_step(z)
    assert out.drivmode == FORWARD
    z = plant_step(kbm, z, out.u0)
    assert ctrl.submit_trajectory(line_trajectory((z[0], 0), (z[0] - 40, 0), 1.5, mode=REVERSE, T=1.0))
    out = ctrl.mpc_step(z)
    assert out.drivmode == FORWARD
    ref = out.Ref.reshape(-1, 9)
    assert np.all(np.diff(ref[:, 3]) <= 0) and ref[0, 3] < z[3]
    assert ref[0, 4] < 0
    modes, speeds = [out.drivmode], [z[3]]
    for _ in range(200):
        z = plant_step(kbm, z, out.u0)
        out = ctrl.mpc_step(z)
        modes.append(out.drivmode)
        speeds.append(z[3])
        if out.drivmode == REVERSE:
            break
    assert modes[-1] == REVERSE
    changes = [i for i in range(1, len(modes)) if modes[i] != modes[i - 1]]
    assert [modes[i] for i in changes] == [STANDSTILL, REVERSE]
    for i in changes:
        assert abs(speeds[i]) <= cfg.v_still
    # the dwell is respected
    assert (changes[1] - changes[0]) * cfg.dt >= cfg.standstill_time - 1e-9


def closed_loop(kbm, cfg, steps=60, z0=(0, 0.3, 0.05, 0.0, 0), constraints=WIDE):
    ctrl = Controller(cfg, constraints=constraints)
    ctrl.submit_trajectory(line_trajectory((0, 0), (80, 0), 3.0))
    z = np.array(z0, dtype=float)
    rows = []
    for _ in range(steps):
        u_prev = ctrl.state.u_prev.copy()
        out = ctrl.mpc_step(z)
        rows.append((u_prev, out, z.copy()))
        z = plant_step(kbm, z, out.u0)
    return rows


def test_input_feasible_against_previous(kbm):
    cfg = small_cfg()
    c = WIDE
    for u_prev, out, _ in closed_loop(kbm, cfg):
        assert np.all(out.u0 >= c.u_min - 1e-12) and np.all(out.u0 <= c.u_max + 1e-12)
        rate = (out.u0 - u_prev) / cfg.dt
        assert np.all(rate >= c.du_min - 1e-12 / cfg.dt) and np.all(rate <= c.du_max + 1e-12 / cfg.dt)


def test_tracks_straight_line(kbm):
    rows = closed_loop(kbm, small_cfg(), steps=120)
    z = rows[-1][2]
    assert abs(z[1]) < 0.05 and abs(z[2]) < 0.02
    assert abs(z[3] - 3.0) < 0.3


def test_deterministic(kbm):
    a = closed_loop(kbm, small_cfg(), steps=20)
    b = closed_loop(kbm, small_cfg(), steps=20)
    for (_, oa, _), (_, ob, _) in zip(a, b):
        assert np.array_equal(oa.to_flat(), ob.to_flat())


def test_one_step_prediction(kbm):
    pred = Controller(small_cfg(onesteppred=1), constraints=WIDE)
    plain = Controller(small_cfg(), constraints=WIDE)
    traj = line_trajectory((0, 0), (80, 0), 3.0)
    pred.submit_trajectory(traj)
    plain.submit_trajectory(traj)
    z = np.array([0, 0.3, 0.05, 1.0, 0])
    for _ in range(5):
        z_pred = integrate_step(kbm, z, pred.state.u_prev, ControllerConfig().integrator)
        a = pred.mpc_step(z)
        b = plain.mpc_step(z_pred)
        assert np.array_equal(a.to_flat(), b.to_flat())
        z = plant_step(kbm, z, a.u0)


def test_path_end_stops(kbm):
    cfg = small_cfg(Npar=30)
    ctrl = Controller(cfg, constraints=WIDE)
    ctrl.submit_trajectory(line_trajectory((0, 0), (6, 0), 2.0, nseg=3))
    z = np.zeros(5)
    for _ in range(400):
        out = ctrl.mpc_step(z)
        z = plant_step(kbm, z, out.u0)
        if ctrl.state.finished:
            break
    assert ctrl.state.finished and out.drivmode == STANDSTILL
    assert abs(z[3]) <= cfg.v_still
    assert math.hypot(z[0] - 6, z[1]) <= cfg.stop_radius


def test_no_trajectory_holds_still():
    ctrl = Controller(small_cfg())
    out = ctrl.mpc_step([1.0, 2.0, 0.3, 0.0, 0.0])
    assert out.drivmode == STANDSTILL and not out.fault
    ref = out.Ref.reshape(-1, 9)
    assert np.all(ref[:, 0] == 1.0) and np.all(ref[:, 3] == 0.0)
