import numpy as np
import pytest

from depthnav import control, dynamics
from depthnav.control import (
    ActionCommand,
    RefGenParams,
    ReferenceState,
    TrackerGains,
    attitude_error,
    attitude_setpoint,
    euler_zyx_to_quat,
    propagate_reference,
    track_reference,
    update_angular_reference,
    update_thrust_reference,
    wrap_angle,
)
from depthnav.dynamics import DroneParams, DroneState


def test_attitude_setpoint_pure_vertical():
    roll, pitch, yaw = attitude_setpoint(ActionCommand(np.array([0.0, 0.0, 9.81]), 0.0), 1.2, 0.01)
    assert roll == 0.0 and pitch == 0.0
    assert abs(yaw - 1.2) < 1e-15


def test_attitude_setpoint_forward_tilt():
    roll, pitch, yaw = attitude_setpoint(ActionCommand(np.array([9.81, 0.0, 9.81]), 0.0), 0.0, 0.01)
    assert abs(pitch - np.pi / 4) < 1e-12
    assert roll == 0.0


def test_attitude_setpoint_yaw_advance_and_wrap():
    _, _, yaw = attitude_setpoint(ActionCommand(np.array([0.0, 0.0, 9.81]), 1.0), 3.0, 0.01)
    assert abs(yaw - 3.01) < 1e-12
    _, _, wrapped = attitude_setpoint(ActionCommand(np.array([0.0, 0.0, 9.81]), 1.0), np.pi, 0.01)
    assert abs(wrapped - (np.pi + 0.01 - 2 * np.pi)) < 1e-12
    assert wrap_angle(np.pi) == np.pi  # boundary stays at +pi


def test_attitude_setpoint_rejects_negative_az():
    with pytest.raises(ValueError):
        attitude_setpoint(ActionCommand(np.array([1.0, 0.0, -1.0]), 0.0), 0.0, 0.01)


def test_attitude_error_zero_at_setpoint():
    q = dynamics.quat_from_axis_angle(np.array([0.2, 0.5, 1.0]), 0.7)
    assert np.allclose(attitude_error(q, q), 0.0, atol=1e-15)


def test_attitude_error_small_angle_about_z():
    q_sp = np.array([1.0, 0.0, 0.0, 0.0])
    q = dynamics.quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.1)
    e = attitude_error(q, q_sp)
    assert abs(e[0]) < 1e-12 and abs(e[1]) < 1e-12
    assert abs(e[2] - 2 * np.sin(0.05)) < 1e-12
    assert abs(e[2] - 0.1) < 1e-4


def test_attitude_error_double_cover():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = dynamics.quat_normalize(rng.standard_normal(4))
        q_sp = dynamics.quat_normalize(rng.standard_normal(4))
        assert np.array_equal(attitude_error(q, q_sp), attitude_error(-q, q_sp))


def unclipped_params(**kw):
    defaults = dict(
        omega_max=np.array([1e9, 1e9, 1e9]),
        omega_dot_max=np.array([1e9, 1e9, 1e9]),
    )
    defaults.update(kw)
    return RefGenParams(**defaults)


def test_angular_reference_equilibrium():
    params = RefGenParams()
    out = update_angular_reference(np.zeros(3), np.zeros(3), params)
    assert np.array_equal(out, np.zeros(3))


def test_angular_reference_matches_scalar_recurrence():
    params = unclipped_params(omega_n=np.array([4.0, 4.0, 4.0]), zeta=np.array([0.7, 0.7, 0.7]))
    e = np.array([0.05, 0.0, 0.0])
    omega = np.zeros(3)
    oracle = 0.0
    for _ in range(500):
        omega = update_angular_reference(e, omega, params)
        oracle = oracle + params.dt * (-2.0 * 4.0 * 0.7 * oracle - 16.0 * 0.05)
        assert abs(omega[0] - oracle) < 1e-9
    assert omega[1] == 0.0 and omega[2] == 0.0


def test_angular_reference_saturation_exact():
    params = RefGenParams()
    omega = np.zeros(3)
    huge = np.array([50.0, 50.0, 50.0])
    first = update_angular_reference(huge, omega, params)
    # rate pinned exactly at the limit
    assert np.array_equal(first, -params.omega_dot_max * params.dt)
    for _ in range(200):
        omega = update_angular_reference(huge, omega, params)
    assert np.array_equal(omega, -params.omega_max)


def test_thrust_reference_fixed_point_and_rate_limit():
    params = RefGenParams(thrust_rate_max=500.0, thrust_max=1e9)
    assert update_thrust_reference(7.0, 7.0, params) == 7.0
    out = update_thrust_reference(0.0, 100.0, params)
    assert abs(out - 5.0) < 1e-12  # clipped to 500 N/s for 0.01 s
    down = update_thrust_reference(100.0, 0.0, params)
    assert abs(down - 95.0) < 1e-12


def test_hover_reference_is_fixed_point():
    drone = DroneParams(k_v=0.0, k_omega=0.0)
    params = RefGenParams()
    ref = ReferenceState.hover(np.array([0.0, 0.0, 2.0]), 0.0, drone)
    cmd = ActionCommand(np.array([0.0, 0.0, 9.81]), 0.0)
    out = ref
    for _ in range(100):
        out = propagate_reference(out, cmd, params, drone)
    assert np.max(np.abs(out.state.as_vector() - ref.state.as_vector())) < 1e-9
    assert abs(out.thrust - ref.thrust) < 1e-12


def test_reference_pitch_converges_to_setpoint():
    drone = DroneParams()
    params = RefGenParams()
    ref = ReferenceState.hover(np.zeros(3), 0.0, drone)
    cmd = ActionCommand(np.array([3.0, 0.0, 9.81]), 0.0)
    target_pitch = np.arctan2(3.0, 9.81)
    horizon = 5.0 / (params.zeta[1] * params.omega_n[1])
    for _ in range(int(np.ceil(horizon / params.dt))):
        ref = propagate_reference(ref, cmd, params, drone)
    q = ref.state.q_WB
    pitch = np.arcsin(np.clip(-2 * (q[1] * q[3] - q[0] * q[2]), -1, 1))
    assert abs(pitch - target_pitch) < 0.02 * abs(target_pitch)


def test_reference_velocity_continuity():
    drone = DroneParams()
    params = RefGenParams()
    rng = np.random.default_rng(5)
    ref = ReferenceState.hover(np.zeros(3), 0.0, drone)
    a_bound = params.thrust_max / drone.mass + 9.81 + 1.0
    prev_v = ref.state.v_W.copy()
    for step in range(400):
        if step % 10 == 0:
            cmd = ActionCommand(
                np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(3, 15)]),
                rng.uniform(-1, 1),
            )
        ref = propagate_reference(ref, cmd, params, drone)
        jump = np.linalg.norm(ref.state.v_W - prev_v)
        drag_bound = drone.k_v * np.linalg.norm(ref.state.v_W)
        assert jump < (a_bound + drag_bound) * params.dt
        prev_v = ref.state.v_W.copy()


def test_reference_bounds_respected_under_random_commands():
    drone = DroneParams()
    params = RefGenParams()
    rng = np.random.default_rng(11)
    ref = ReferenceState.hover(np.zeros(3), 0.0, drone)
    for step in range(10_000):
        if step % 10 == 0:
            cmd = ActionCommand(
                np.array([rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(2, 18)]),
                rng.uniform(-2, 2),
            )
        ref = propagate_reference(ref, cmd, params, drone)
        assert np.all(np.abs(ref.omega_sp) <= params.omega_max)
        assert 0.0 <= ref.thrust <= params.thrust_max


def test_tracker_zero_wrench_at_reference():
    drone = DroneParams()
    gains = TrackerGains()
    ref = ReferenceState.hover(np.zeros(3), 0.3, drone)
    state = ref.state.copy()
    wrench = track_reference(state, ref, gains, drone, thrust_max=25.0)
    assert np.allclose(wrench.tau_a, 0.0, atol=1e-12)
    assert abs(wrench.f_a[2] - ref.thrust) < 1e-12


def test_tracker_gyroscopic_cancellation():
    """At zero tracking error the commanded torque cancels omega x J omega."""
    drone = DroneParams(k_omega=0.0)
    gains = TrackerGains(tau_max=np.array([10.0, 10.0, 10.0]))
    state = DroneState(omega_B=np.array([1.0, -0.7, 0.4]))
    ref = ReferenceState(state=state.copy(), omega_sp=state.omega_B.copy(), thrust=drone.hover_thrust)
    ref.state.omega_B = state.omega_B.copy()
    wrench = track_reference(state, ref, gains, drone, thrust_max=25.0)
    d = dynamics.derivative(state, wrench, drone)
    assert np.allclose(d.omega_B, 0.0, atol=1e-12)


def test_tracker_restoring_torque_sign():
    drone = DroneParams()
    gains = TrackerGains()
    ref = ReferenceState.hover(np.zeros(3), 0.0, drone)
    state = ref.state.copy()
    state.q_WB = dynamics.quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), 0.1)
    wrench = track_reference(state, ref, gains, drone, thrust_max=25.0)
    assert wrench.tau_a[0] < 0.0


def test_tracker_closed_loop_settles():
    drone = DroneParams()
    gains = TrackerGains()
    ref = ReferenceState.hover(np.zeros(3), 0.0, drone)
    state = ref.state.copy()
    state.q_WB = dynamics.quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), 0.3)
    for _ in range(100):
        wrench = track_reference(state, ref, gains, drone, thrust_max=25.0)
        state = dynamics.step(state, wrench, drone, 0.01)
    err = attitude_error(state.q_WB, ref.state.q_WB)
    assert np.linalg.norm(err) < 0.01


def test_setpoint_reproduces_command_direction():
    """R_sp e_z is parallel to a_cmd (yaw-aligned frame), the Eq-7 consistency."""
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = np.array([rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0.5, 18)])
        roll, pitch, _ = attitude_setpoint(ActionCommand(a, 0.0), 0.0, 0.01)
        q_sp = euler_zyx_to_quat(roll, pitch, 0.0)
        body_z = dynamics.quat_rotate(q_sp, np.array([0.0, 0.0, 1.0]))
        assert np.max(np.abs(body_z - a / np.linalg.norm(a))) < 1e-9


def test_full_control_pipeline_deterministic():
    drone = DroneParams()
    params = RefGenParams()
    gains = TrackerGains()

    def run():
        ref = ReferenceState.hover(np.zeros(3), 0.0, drone)
        state = ref.state.copy()
        cmd = ActionCommand(np.array([2.0, -1.0, 11.0]), 0.5)
        log = []
        for _ in range(50):
            ref = propagate_reference(ref, cmd, params, drone)
            wrench = track_reference(state, ref, gains, drone, params.thrust_max)
            state = dynamics.step(state, wrench, drone, params.dt)
            log.append(state.as_vector())
        return np.array(log)

    assert np.array_equal(run(), run())


def test_refgen_params_validation():
    with pytest.raises(ValueError):
        RefGenParams(dt=0.03, action_period=0.1)
    with pytest.raises(ValueError):
        RefGenParams(omega_n=np.array([0.0, 1.0, 1.0]))
