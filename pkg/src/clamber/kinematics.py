"""Leg kinematic chains for a multi-limbed climbing robot.

Each leg is a serial chain of three revolute joints (yaw-pitch-pitch for
the default desk geometry).  This module provides forward kinematics,
analytic Jacobians, the worst-case Jacobian norm constant used by the
conservative contact-force bound, and the Cartesian leg stiffness used
for indirect force control.

All quantities are SI (meters, radians, newtons, newton-meters).  Euler
angles are extrinsic Z-Y-X throughout the project: ``R = Rx @ Ry @ Rz``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


class SingularConfiguration(Exception):
    """Raised when a leg Jacobian is too ill-conditioned to invert."""


# ---------------------------------------------------------------------------
# rotations


def rotation_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(euler) -> np.ndarray:
    """Body rotation matrix from extrinsic Z-Y-X Euler angles (x, y, z order).

    The rotation is applied about the world z axis first, then world y,
    then world x, i.e. ``R = Rx(e[0]) @ Ry(e[1]) @ Rz(e[2])``.
    """
    e = np.asarray(euler, dtype=float)
    return rotation_x(e[0]) @ rotation_y(e[1]) @ rotation_z(e[2])


def euler_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_euler` (away from the pitch singularity)."""
    # R = Rx(a) Ry(b) Rz(c):  R[0,2] = sin(b) ... derived from the product.
    b = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    if abs(abs(R[0, 2]) - 1.0) < 1e-12:
        # gimbal lock: fold everything into a
        a = np.arctan2(R[1, 0], R[1, 1])
        return np.array([a, b, 0.0])
    a = np.arctan2(-R[1, 2], R[2, 2])
    c = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])


def euler_rotation_derivatives(euler) -> list[np.ndarray]:
    """Partial derivatives of rotation_from_euler with respect to each angle."""
    e = np.asarray(euler, dtype=float)
    Rx, Ry, Rz = rotation_x(e[0]), rotation_y(e[1]), rotation_z(e[2])
    dRx = _drot(rotation_x, e[0])
    dRy = _drot(rotation_y, e[1])
    dRz = _drot(rotation_z, e[2])
    return [dRx @ Ry @ Rz, Rx @ dRy @ Rz, Rx @ Ry @ dRz]


def _drot(rot, a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    if rot is rotation_x:
        return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    if rot is rotation_y:
        return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == v x u."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    a = np.asarray(axis, dtype=float)
    K = skew(a)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class Pose:
    """World body pose: COM position plus extrinsic Z-Y-X Euler angles."""

    position: np.ndarray
    euler: np.ndarray

    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.euler)


IDENTITY_POSE = Pose(np.zeros(3), np.zeros(3))


# ---------------------------------------------------------------------------
# leg chain


@dataclass(frozen=True)
class LegChain:
    """One 3-DOF serial leg: joint axes, link lengths and joint limits.

    ``hip_offset`` locates the chain root on the body (body frame, from the
    COM).  ``hip_yaw_mount`` rotates the whole chain about the body z axis so
    legs can point sideways.  Each joint axis is expressed in the frame of
    the preceding link; links extend along local +x.
    """

    link_lengths: np.ndarray
    joint_axes: np.ndarray
    hip_offset: np.ndarray
    hip_yaw_mount: float
    joint_min: np.ndarray
    joint_max: np.ndarray
    name: str = "leg"

    def __post_init__(self):
        for attr in ("link_lengths", "hip_offset", "joint_min", "joint_max"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        object.__setattr__(self, "joint_axes", np.asarray(self.joint_axes, dtype=float))
        if np.any(self.link_lengths <= 0):
            raise ValueError("link lengths must be positive")
        if np.any(self.joint_min >= self.joint_max):
            raise ValueError("joint_min must be below joint_max elementwise")

    @property
    def dof(self) -> int:
        return len(self.link_lengths)


def _chain_frames(leg: LegChain, theta):
    """Joint origins and world-of-body axes along the chain (body frame).

    Returns (origins, axes, toe): origins[k] and axes[k] are the position and
    rotation axis of joint k, toe is the foot tip, all in the body frame.
    """
    theta = np.asarray(theta, dtype=float)
    R = rotation_z(leg.hip_yaw_mount)
    o = leg.hip_offset.copy()
    origins, axes = [], []
    for k in range(leg.dof):
        axes.append(R @ leg.joint_axes[k])
        origins.append(o.copy())
        R = R @ rotation_about_axis(leg.joint_axes[k], theta[k])
        o = o + R @ np.array([leg.link_lengths[k], 0.0, 0.0])
    return origins, axes, o


def forward_kinematics(leg: LegChain, theta, body_pose: Pose = IDENTITY_POSE) -> np.ndarray:
    """World-frame toe position for joint angles ``theta``.

    Total function: out-of-limit angles are evaluated anyway (limits are
    enforced by the planner, not here).
    """
    _, _, toe_body = _chain_frames(leg, theta)
    return np.asarray(body_pose.position, dtype=float) + body_pose.rotation() @ toe_body


def foot_in_body(leg: LegChain, theta) -> np.ndarray:
    """Toe position in the body frame."""
    _, _, toe_body = _chain_frames(leg, theta)
    return toe_body


def jacobian(leg: LegChain, theta) -> np.ndarray:
    """Analytic body-frame Jacobian d(toe)/d(theta), one column per joint."""
    origins, axes, toe = _chain_frames(leg, theta)
    cols = [np.cross(axes[k], toe - origins[k]) for k in range(leg.dof)]
    return np.column_stack(cols)


def jacobian_theta_derivatives(leg: LegChain, theta) -> np.ndarray:
    """Exact dJ/dtheta as an array D with D[m] = dJ/dtheta_m.

    Uses the revolute-chain identities: joint axes and origins only depend
    on the angles of the joints before them.
    """
    origins, axes, toe = _chain_frames(leg, theta)
    n = leg.dof
    J = jacobian(leg, theta)
    D = np.zeros((n, 3, n))
    for m in range(n):
        for k in range(n):
            da_k = np.cross(axes[m], axes[k]) if m < k else np.zeros(3)
            dtoe = J[:, m]
            do_k = np.cross(axes[m], origins[k] - origins[m]) if m < k else np.zeros(3)
            D[m][:, k] = np.cross(da_k, toe - origins[k]) + np.cross(
                axes[k], dtoe - do_k
            )
    return D


def max_jacobian_infnorm(leg: LegChain, grid_resolution: int = 24) -> float:
    """Worst-case inf-norm of J(theta)^T over the joint box.

    Scans a uniform grid (``grid_resolution`` points per joint), then polishes
    the best grid point with a bounded local search.  The result feeds the
    conservative contact-force bound, so erring high is safe and erring low
    is not; the grid keeps the search global, the polish tightens it.
    """
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be at least 2 per joint")

    def norm_at(theta):
        J = jacobian(leg, theta)
        return float(np.max(np.sum(np.abs(J), axis=0)))

    grids = [
        np.linspace(leg.joint_min[k], leg.joint_max[k], grid_resolution)
        for k in range(leg.dof)
    ]
    best_val, best_theta = -np.inf, None
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    for theta in pts:
        v = norm_at(theta)
        if v > best_val:
            best_val, best_theta = v, theta
    res = minimize(
        lambda t: -norm_at(t),
        best_theta,
        method="Nelder-Mead",
        bounds=list(zip(leg.joint_min, leg.joint_max)),
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000},
    )
    return float(max(best_val, -res.fun))


def vjm_leg_stiffness(leg: LegChain, theta, joint_stiffness) -> np.ndarray:
    """Cartesian leg stiffness K = (J k^-1 J^T)^-1 of the virtual-spring model.

    ``joint_stiffness`` holds the virtual spring constant of each position
    controlled joint (N*m/rad).  Raises :class:`SingularConfiguration` when
    the Jacobian condition number exceeds 1e8.
    """
    k = np.asarray(joint_stiffness, dtype=float)
    if np.any(k <= 0):
        raise ValueError("joint stiffness entries must be positive")
    J = jacobian(leg, theta)
    if np.linalg.cond(J) > 1e8:
        raise SingularConfiguration(
            f"leg {leg.name!r}: Jacobian condition number exceeds 1e8"
        )
    compliance = J @ np.diag(1.0 / k) @ J.T
    K = np.linalg.inv(compliance)
    return (K + K.T) / 2.0


# ---------------------------------------------------------------------------
# robot model


@dataclass(frozen=True)
class RobotModel:
    """Whole-robot description: legs plus the scalar limits the planner uses.

    ``torque_limit`` is shared by all actuators (scalar); a per-joint vector
    is accepted, in which case the conservative force bound uses its minimum.
    """

    legs: tuple[LegChain, ...]
    mass: float
    torque_limit: np.ndarray
    reach_radius: float
    max_body_step: np.ndarray
    max_body_rotation_step: np.ndarray
    max_toe_step: float
    joint_stiffness: np.ndarray = field(default_factory=lambda: np.full(3, 600.0))

    def __post_init__(self):
        object.__setattr__(self, "legs", tuple(self.legs))
        object.__setattr__(
            self, "torque_limit", np.atleast_1d(np.asarray(self.torque_limit, dtype=float))
        )
        for attr in ("max_body_step", "max_body_rotation_step", "joint_stiffness"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if np.any(self.torque_limit <= 0):
            raise ValueError("torque limit must be positive")
        if self.reach_radius <= 0 or self.max_toe_step <= 0:
            raise ValueError("reach radius and step limits must be positive")
        if np.any(self.max_body_step <= 0) or np.any(self.max_body_rotation_step <= 0):
            raise ValueError("body step limits must be positive")
        if np.any(self.joint_stiffness <= 0):
            raise ValueError("joint stiffness must be positive")

    @property
    def n_legs(self) -> int:
        return len(self.legs)

    @property
    def scalar_torque_limit(self) -> float:
        return float(np.min(self.torque_limit))

    def hip_offset(self, i: int) -> np.ndarray:
        return self.legs[i].hip_offset


LEG_NAMES = ("LF", "RF", "LM", "RM", "LR", "RR")


def default_robot(
    mass: float = 10.0,
    torque_limit: float = 100.0,
    link_lengths=(0.10, 0.28, 0.30),
    reach_radius: float = 0.55,
    max_body_step=(0.30, 0.30, 0.30),
    max_body_rotation_step=(0.5, 0.5, 0.5),
    max_toe_step: float = 0.45,
    joint_stiffness=(600.0, 600.0, 600.0),
) -> RobotModel:
    """Desk-scale hexapod: six yaw-pitch-pitch legs on a rectangular body.

    Left legs (negative x) face the left wall, right legs the right wall,
    with front/middle/rear rows spaced along y.
    """
    axes = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    jmin = np.array([-1.2, -1.4, -2.4])
    jmax = np.array([1.2, 1.4, 2.4])
    lateral, row = 0.12, 0.25
    mounts = {
        "LF": ((-lateral, row, 0.0), np.pi),
        "RF": ((lateral, row, 0.0), 0.0),
        "LM": ((-lateral, 0.0, 0.0), np.pi),
        "RM": ((lateral, 0.0, 0.0), 0.0),
        "LR": ((-lateral, -row, 0.0), np.pi),
        "RR": ((lateral, -row, 0.0), 0.0),
    }
    legs = tuple(
        LegChain(
            link_lengths=np.asarray(link_lengths, dtype=float),
            joint_axes=axes,
            hip_offset=np.array(mounts[name][0]),
            hip_yaw_mount=mounts[name][1],
            joint_min=jmin,
            joint_max=jmax,
            name=name,
        )
        for name in LEG_NAMES
    )
    return RobotModel(
        legs=legs,
        mass=mass,
        torque_limit=np.atleast_1d(float(torque_limit)),
        reach_radius=reach_radius,
        max_body_step=np.asarray(max_body_step, dtype=float),
        max_body_rotation_step=np.asarray(max_body_rotation_step, dtype=float),
        max_toe_step=max_toe_step,
        joint_stiffness=np.asarray(joint_stiffness, dtype=float),
    )
