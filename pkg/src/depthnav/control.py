"""Reference generator and low-level attitude tracker.

An RL action is a body-frame acceleration command plus a yaw rate. The
reference generator turns it into a smooth, dynamically feasible reference
state: tilt setpoints from the acceleration direction, a saturated
second-order angular-velocity reference, a rate-limited thrust reference,
and a reference rigid body propagated through the same dynamics as the
drone. A PD tracker then produces the wrench applied to the actual drone.

Everything broadcasts over leading axes so a vectorized environment can run
N drones through one call per inner step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import DroneParams, DroneState, Wrench


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return ((np.asarray(a) - np.pi) % (-2.0 * np.pi)) + np.pi


def euler_zyx_to_quat(roll, pitch, yaw) -> np.ndarray:
    """Quaternion for intrinsic Z-Y-X Euler angles, broadcasting."""
    roll, pitch, yaw = np.asarray(roll), np.asarray(pitch), np.asarray(yaw)
    cr, sr = np.cos(0.5 * roll), np.sin(0.5 * roll)
    cp, sp = np.cos(0.5 * pitch), np.sin(0.5 * pitch)
    cy, sy = np.cos(0.5 * yaw), np.sin(0.5 * yaw)
    return np.stack(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ],
        axis=-1,
    )


@dataclass
class ActionCommand:
    """Commanded body-frame acceleration (m/s^2) and yaw rate (rad/s)."""

    a_cmd: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    yaw_rate: float = 0.0

    def __post_init__(self) -> None:
        self.a_cmd = np.asarray(self.a_cmd, dtype=float)


@dataclass
class RefGenParams:
    """Gains and limits of the reference generator.

    The second-order law runs componentwise on (roll, pitch, yaw) axes with
    natural frequency omega_n and damping zeta. dt is the inner simulation
    step and must divide action_period, the RL action hold time.
    """

    omega_n: np.ndarray = field(default_factory=lambda: np.array([8.0, 8.0, 4.0]))
    zeta: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    omega_max: np.ndarray = field(default_factory=lambda: np.array([3.0, 3.0, 1.5]))
    omega_dot_max: np.ndarray = field(default_factory=lambda: np.array([30.0, 30.0, 10.0]))
    thrust_rate_max: float = 15.0
    thrust_max: float = 25.0
    rate_gain: float = 40.0
    dt: float = 0.01
    action_period: float = 0.1

    def __post_init__(self) -> None:
        self.omega_n = np.asarray(self.omega_n, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.omega_max = np.asarray(self.omega_max, dtype=float)
        self.omega_dot_max = np.asarray(self.omega_dot_max, dtype=float)
        for name in ("omega_n", "zeta", "omega_max", "omega_dot_max"):
            if np.any(getattr(self, name) <= 0.0):
                raise ValueError(f"{name} must be strictly positive")
        if self.thrust_rate_max <= 0.0 or self.thrust_max <= 0.0 or self.dt <= 0.0:
            raise ValueError("thrust_rate_max, thrust_max, and dt must be positive")
        n = self.action_period / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("dt must divide action_period")

    @property
    def steps_per_action(self) -> int:
        return int(round(self.action_period / self.dt))


@dataclass
class TrackerGains:
    """PD gains of the wrench-producing attitude/rate tracker."""

    k_q: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0, 25.0]))
    k_omega: np.ndarray = field(default_factory=lambda: np.array([18.0, 18.0, 8.0]))
    tau_max: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.6, 0.25]))

    def __post_init__(self) -> None:
        self.k_q = np.asarray(self.k_q, dtype=float)
        self.k_omega = np.asarray(self.k_omega, dtype=float)
        self.tau_max = np.asarray(self.tau_max, dtype=float)


@dataclass
class ReferenceState:
    """Reference rigid body plus its angular-velocity and thrust setpoints."""

    state: DroneState = field(default_factory=DroneState)
    omega_sp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    thrust: float = 0.0

    @staticmethod
    def hover(position: np.ndarray, yaw: float, params: DroneParams) -> "ReferenceState":
        q = euler_zyx_to_quat(0.0, 0.0, yaw)
        st = DroneState(p_W=np.asarray(position, dtype=float).copy(), q_WB=q)
        return ReferenceState(state=st, omega_sp=np.zeros(3), thrust=params.hover_thrust)

    def copy(self) -> "ReferenceState":
        return ReferenceState(self.state.copy(), self.omega_sp.copy(), float(self.thrust))


# ---------------------------------------------------------------------------
# reference-generator pieces
# ---------------------------------------------------------------------------

def attitude_setpoint(cmd: ActionCommand, current_yaw, dt: float):
    """Tilt and yaw setpoints from the commanded specific force.

    pitch = atan2(a_x, a_z), roll = atan2(-a_y, sqrt(a_z^2 + a_x^2)); with
    this pairing the setpoint body-z axis points exactly along a_cmd in the
    yaw-aligned frame. Yaw advances by yaw_rate * dt and wraps to (-pi, pi].
    """
    ax, ay, az = cmd.a_cmd[..., 0], cmd.a_cmd[..., 1], cmd.a_cmd[..., 2]
    if np.any(az <= 0.0):
        raise ValueError("a_z command must be positive (thrust points up in body frame)")
    pitch_sp = np.arctan2(ax, az)
    roll_sp = np.arctan2(-ay, np.sqrt(az * az + ax * ax))
    yaw_sp = wrap_angle(np.asarray(current_yaw) + cmd.yaw_rate * dt)
    return roll_sp, pitch_sp, yaw_sp


def attitude_error(q: np.ndarray, q_sp: np.ndarray) -> np.ndarray:
    """Shortest-path small-angle attitude error, 2 * sign(w_e) * vec(q_e).

    q_e = q_sp^-1 (x) q measures the rotation taking the setpoint frame to
    the current frame; the sign factor keeps the error consistent across the
    quaternion double cover.
    """
    q_e = dynamics.quat_multiply(dynamics.quat_conjugate(q_sp), q)
    sign = np.where(q_e[..., 0:1] < 0.0, -1.0, 1.0)
    return 2.0 * sign * q_e[..., 1:]


def update_angular_reference(e_theta: np.ndarray, omega_sp: np.ndarray, params: RefGenParams) -> np.ndarray:
    """One Euler step of the saturated second-order angular reference."""
    omega_dot = -2.0 * params.omega_n * params.zeta * omega_sp - params.omega_n ** 2 * e_theta
    omega_dot = np.clip(omega_dot, -params.omega_dot_max, params.omega_dot_max)
    new_omega = omega_sp + omega_dot * params.dt
    return np.clip(new_omega, -params.omega_max, params.omega_max)


def update_thrust_reference(thrust, thrust_target, params: RefGenParams):
    """Move the current thrust toward its target at a bounded rate."""
    rate = np.clip(
        (np.asarray(thrust_target) - np.asarray(thrust)) / params.action_period,
        -params.thrust_rate_max,
        params.thrust_rate_max,
    )
    return np.clip(thrust + rate * params.dt, 0.0, params.thrust_max)


def propagate_reference(
    ref: ReferenceState,
    cmd: ActionCommand,
    params: RefGenParams,
    drone_params: DroneParams,
) -> ReferenceState:
    """Advance the reference rigid body by one inner step dt.

    The attitude setpoint is rebuilt from the command at the reference's
    current yaw, the angular and thrust references are updated, and the
    reference state is integrated through the rigid-body dynamics with a
    rate-tracking torque. Returns a new ReferenceState.
    """
    st = ref.state
    yaw = dynamics.yaw_from_quat(st.q_WB)
    roll_sp, pitch_sp, yaw_sp = attitude_setpoint(cmd, yaw, params.dt)
    q_sp = euler_zyx_to_quat(roll_sp, pitch_sp, yaw_sp)

    e_theta = attitude_error(st.q_WB, q_sp)
    omega_sp = update_angular_reference(e_theta, ref.omega_sp, params)

    thrust_target = drone_params.mass * float(np.linalg.norm(cmd.a_cmd))
    thrust = float(update_thrust_reference(ref.thrust, thrust_target, params))

    j_omega = st.omega_B @ drone_params.inertia.T
    tau = (params.rate_gain * (omega_sp - st.omega_B)) @ drone_params.inertia.T + np.cross(st.omega_B, j_omega)
    wrench = Wrench(f_a=np.array([0.0, 0.0, thrust]), tau_a=tau)
    new_state = dynamics.step(st, wrench, drone_params, params.dt)
    return ReferenceState(state=new_state, omega_sp=omega_sp, thrust=thrust)


def batched_substep(
    states: np.ndarray,
    refs: np.ndarray,
    omega_sp: np.ndarray,
    thrust: np.ndarray,
    a_cmd: np.ndarray,
    yaw_rate: np.ndarray,
    params: RefGenParams,
    gains: TrackerGains,
    drone: DroneParams,
):
    """One inner control step for K drones at once.

    Vectorized mirror of propagate_reference followed by track_reference and
    dynamics.step on packed (K, 13) state arrays; the scalar path stays the
    reference implementation and an equivalence test pins the two together.
    Returns (states, refs, omega_sp, thrust), all new arrays.
    """
    dt = params.dt
    ax, ay, az = a_cmd[:, 0], a_cmd[:, 1], a_cmd[:, 2]
    yaw = dynamics.yaw_from_quat(refs[:, 3:7])
    pitch_sp = np.arctan2(ax, az)
    roll_sp = np.arctan2(-ay, np.sqrt(az * az + ax * ax))
    yaw_sp = wrap_angle(yaw + yaw_rate * dt)
    q_sp = euler_zyx_to_quat(roll_sp, pitch_sp, yaw_sp)

    e_theta = attitude_error(refs[:, 3:7], q_sp)
    omega_sp = update_angular_reference(e_theta, omega_sp, params)
    thrust_target = drone.mass * np.linalg.norm(a_cmd, axis=1)
    thrust = update_thrust_reference(thrust, thrust_target, params)

    inertia_t = drone.inertia.T
    omega_ref = refs[:, 10:13]
    j_omega_ref = omega_ref @ inertia_t
    tau_ref = (params.rate_gain * (omega_sp - omega_ref)) @ inertia_t + np.cross(omega_ref, j_omega_ref)
    f_ref = np.zeros_like(tau_ref)
    f_ref[:, 2] = thrust
    refs = dynamics._step_vec(refs, f_ref, tau_ref, drone, dt)

    e_q = attitude_error(states[:, 3:7], refs[:, 3:7])
    omega = states[:, 10:13]
    e_w = omega - refs[:, 10:13]
    j_omega = omega @ inertia_t
    tau = (-gains.k_q * e_q - gains.k_omega * e_w) @ inertia_t + np.cross(omega, j_omega)
    tau = np.clip(tau, -gains.tau_max, gains.tau_max)
    thrust_vec = np.zeros_like(tau)
    thrust_vec[:, 2] = thrust
    thrust_world = dynamics.quat_rotate(refs[:, 3:7], thrust_vec)
    body_z = dynamics.quat_rotate(states[:, 3:7], np.array([0.0, 0.0, 1.0]))
    f_z = np.clip(np.sum(thrust_world * body_z, axis=1), 0.0, params.thrust_max)
    f_a = np.zeros_like(tau)
    f_a[:, 2] = f_z
    states = dynamics._step_vec(states, f_a, tau, drone, dt)
    return states, refs, omega_sp, thrust


def track_reference(
    state: DroneState,
    ref: ReferenceState,
    gains: TrackerGains,
    drone_params: DroneParams,
    thrust_max: float,
) -> Wrench:
    """PD attitude/rate law producing the wrench applied to the drone.

    tau = J(-K_q e_q - K_w (omega - omega_ref)) + omega x J omega cancels the
    gyroscopic term of the dynamics, so at zero error the net angular
    acceleration is zero. Thrust is the reference thrust vector projected on
    the actual body-z axis. Outputs are clipped to actuator bounds.
    """
    e_q = attitude_error(state.q_WB, ref.state.q_WB)
    e_w = state.omega_B - ref.state.omega_B
    j_omega = state.omega_B @ drone_params.inertia.T
    tau = (-gains.k_q * e_q - gains.k_omega * e_w) @ drone_params.inertia.T + np.cross(state.omega_B, j_omega)
    tau = np.clip(tau, -gains.tau_max, gains.tau_max)

    thrust_vec_ref = dynamics.quat_rotate(ref.state.q_WB, np.array([0.0, 0.0, ref.thrust]))
    body_z = dynamics.quat_rotate(state.q_WB, np.array([0.0, 0.0, 1.0]))
    thrust = float(np.clip(np.dot(thrust_vec_ref, body_z), 0.0, thrust_max))
    return Wrench(f_a=np.array([0.0, 0.0, thrust]), tau_a=tau)
