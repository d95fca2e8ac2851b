"""Rigid-body quadrotor dynamics with linear drag, integrated by RK4.

State layout is a flat 13-vector ``[p_W(3), q_WB(4), v_W(3), omega_B(3)]``.
All functions broadcast over leading axes, so a vectorized environment can
step ``(N, 13)`` state arrays through the same code path as a single drone.

Quaternion convention: scalar-first ``[w, x, y, z]``, Hamilton product,
``q_WB`` rotates body-frame vectors into the world frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

GRAVITY = np.array([0.0, 0.0, -9.81])


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 (x) q2, broadcasting over leading axes."""
    w1, x1, y1, z1 = (q1[..., i] for i in range(4))
    w2, x2, y2, z2 = (q2[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise NumericalError("cannot normalize a zero quaternion")
    return q / norm


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q (body -> world for q_WB)."""
    w = q[..., 0:1]
    u = q[..., 1:]
    # v' = v + 2 w (u x v) + 2 u x (u x v)
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by the inverse of q (world -> body for q_WB)."""
    return quat_rotate(quat_conjugate(q), v)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix R_WB for scalar-first unit quaternion q_WB."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_rotmat(rot: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion for a proper rotation matrix (Shepperd)."""
    m = np.asarray(rot, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_from_euler_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Quaternion for intrinsic Z-Y-X (yaw, pitch, roll) Euler angles."""
    qz = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), pitch)
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), roll)
    return quat_multiply(quat_multiply(qz, qy), qx)


def yaw_from_quat(q: np.ndarray) -> np.ndarray:
    """Yaw (Z-Y-X convention) of q_WB; the heading of the body-x axis."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


# ---------------------------------------------------------------------------
# state and parameters
# ---------------------------------------------------------------------------

@dataclass
class DroneState:
    """Position, attitude quaternion, linear velocity, body angular rate."""

    p_W: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_WB: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    v_W: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega_B: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p_W, self.q_WB, self.v_W, self.omega_B])

    @staticmethod
    def from_vector(x: np.ndarray) -> "DroneState":
        x = np.asarray(x, dtype=float)
        return DroneState(x[0:3].copy(), x[3:7].copy(), x[7:10].copy(), x[10:13].copy())

    def copy(self) -> "DroneState":
        return DroneState.from_vector(self.as_vector())


@dataclass
class DroneParams:
    """Mass, inertia, gravity, and the linear drag coefficients.

    Drag model: body-frame force ``f_d = -k_v * m * (R_WB^T v_W)`` and torque
    ``tau_d = -k_omega * (J omega_B)``. Both coefficients have unit 1/s.
    """

    mass: float = 0.75
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.0025, 0.0025, 0.004]))
    g_W: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    k_v: float = 0.1
    k_omega: float = 0.05
    drone_radius: float = 0.15

    def __post_init__(self) -> None:
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T):
            raise ValueError("inertia matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0.0):
            raise ValueError("inertia matrix must be positive definite")
        self._inertia_inv = np.linalg.inv(self.inertia)

    @property
    def hover_thrust(self) -> float:
        return self.mass * float(np.linalg.norm(self.g_W))


@dataclass
class Wrench:
    """Propeller thrust force and torque, both expressed in the body frame."""

    f_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tau_a: np.ndarray = field(default_factory=lambda: np.zeros(3))


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _derivative_vec(x: np.ndarray, f_a: np.ndarray, tau_a: np.ndarray, params: DroneParams) -> np.ndarray:
    """Time derivative of the packed state; broadcasts over leading axes."""
    q = x[..., 3:7]
    v = x[..., 7:10]
    omega = x[..., 10:13]

    omega_quat = np.concatenate([np.zeros_like(omega[..., :1]), omega], axis=-1)
    q_dot = 0.5 * quat_multiply(q, omega_quat)

    f_drag = -params.k_v * params.mass * quat_rotate_inverse(q, v)
    v_dot = params.g_W + quat_rotate(q, f_a + f_drag) / params.mass

    j_omega = omega @ params.inertia.T
    tau_drag = -params.k_omega * j_omega
    omega_dot = (tau_a + tau_drag - np.cross(omega, j_omega)) @ params._inertia_inv.T

    return np.concatenate([v, q_dot, v_dot, omega_dot], axis=-1)


def derivative(state: DroneState, wrench: Wrench, params: DroneParams) -> DroneState:
    """Rigid-body state derivative for one drone.

    Returns a DroneState whose fields hold (p_dot, q_dot, v_dot, omega_dot);
    the quaternion slot is the 4-vector rate, not a unit quaternion.
    """
    x = state.as_vector()
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(wrench.f_a)) or not np.all(np.isfinite(wrench.tau_a)):
        raise NumericalError("non-finite state or wrench")
    d = _derivative_vec(x, np.asarray(wrench.f_a, dtype=float), np.asarray(wrench.tau_a, dtype=float), params)
    return DroneState(d[0:3], d[3:7], d[7:10], d[10:13])


def _step_vec(x: np.ndarray, f_a: np.ndarray, tau_a: np.ndarray, params: DroneParams, dt: float) -> np.ndarray:
    """One RK4 step of the packed state with post-step quaternion renorm."""
    k1 = _derivative_vec(x, f_a, tau_a, params)
    k2 = _derivative_vec(x + 0.5 * dt * k1, f_a, tau_a, params)
    k3 = _derivative_vec(x + 0.5 * dt * k2, f_a, tau_a, params)
    k4 = _derivative_vec(x + dt * k3, f_a, tau_a, params)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., 3:7] = quat_normalize(out[..., 3:7])
    return out


def step(state: DroneState, wrench: Wrench, params: DroneParams, dt: float) -> DroneState:
    """Advance the state by dt seconds under a constant wrench."""
    if not 0.0 < dt <= 0.01:
        raise ValueError(f"dt must be in (0, 0.01], got {dt}")
    x = state.as_vector()
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(wrench.f_a)) or not np.all(np.isfinite(wrench.tau_a)):
        raise NumericalError("non-finite state or wrench")
    out = _step_vec(x, np.asarray(wrench.f_a, dtype=float), np.asarray(wrench.tau_a, dtype=float), params, dt)
    return DroneState.from_vector(out)


def save_trajectory_csv(path: str, times: np.ndarray, states: list[DroneState]) -> None:
    """Write a trajectory as CSV with header t, p(3), q(4), v(3), omega(3)."""
    if len(times) != len(states):
        raise ValueError("times and states must have equal length")
    header = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, s in zip(times, states):
            writer.writerow([f"{t:.6f}"] + [repr(float(v)) for v in s.as_vector()])
