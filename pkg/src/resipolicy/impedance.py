"""Force-mixed position-based hybrid impedance execution layer.

Runs at 125 Hz. A virtual attractor wrench is computed from the tracking
error, blended with the measured external wrench, and mapped through a
small diagonal admittance into a pose offset: x_cmd = x_ref + A * ((1-k_f)
* (K e - D xdot) + k_f * F_ext). Free-space tracking is exact (zero error,
zero velocity and zero wrench command the reference itself); under contact
the external-wrench term backs the command away from the constraint.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial.transform import Rotation

from .core import ConfigError, Pose7

AXIS_NAMES = ("x", "y", "z", "rx", "ry", "rz")


@dataclasses.dataclass(eq=False)
class ImpedanceParams:
    """Diagonal stiffness K, damping D, admittance A, and mixing gain k_f.

    k_f may be a scalar or a per-axis 6-vector; the stability guard
    max_i A_i * K_i < 1 is enforced at construction.
    """

    stiffness: np.ndarray
    damping: np.ndarray
    admittance: np.ndarray
    k_f: np.ndarray

    def __post_init__(self):
        self.stiffness = np.asarray(self.stiffness, dtype=np.float64).reshape(6)
        self.damping = np.asarray(self.damping, dtype=np.float64).reshape(6)
        self.admittance = np.asarray(self.admittance, dtype=np.float64).reshape(6)
        kf = np.asarray(self.k_f, dtype=np.float64)
        self.k_f = np.full(6, float(kf)) if kf.ndim == 0 else kf.reshape(6)
        for name, arr in (("stiffness", self.stiffness), ("damping", self.damping), ("admittance", self.admittance)):
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} diagonal must be finite and nonnegative")
        if np.any(self.k_f < 0) or np.any(self.k_f > 1):
            raise ConfigError("k_f must lie in [0, 1]")
        guard = self.admittance * self.stiffness
        if np.any(guard >= 1.0):
            axis = int(np.argmax(guard))
            raise ConfigError(
                f"admittance*stiffness = {guard[axis]:.4f} on axis "
                f"{AXIS_NAMES[axis]} violates the stability guard (must be < 1)"
            )

    @classmethod
    def default(cls):
        return cls(
            stiffness=[300.0] * 3 + [30.0] * 3,
            damping=[30.0] * 3 + [3.0] * 3,
            admittance=[1e-3] * 3 + [1e-2] * 3,
            k_f=0.1,
        )

    @classmethod
    def rigid(cls):
        """A = 0: x_cmd degenerates to x_ref exactly."""
        p = cls.default()
        return cls(p.stiffness, p.damping, np.zeros(6), p.k_f)

    def to_dict(self):
        return {
            "stiffness": self.stiffness.tolist(),
            "damping": self.damping.tolist(),
            "admittance": self.admittance.tolist(),
            "k_f": self.k_f.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["stiffness"], d["damping"], d["admittance"], d["k_f"])


@dataclasses.dataclass(eq=False)
class RobotState:
    """Current pose, twist estimate, and measured external wrench."""

    pose: Pose7
    twist: np.ndarray
    wrench: np.ndarray

    def __post_init__(self):
        self.twist = np.asarray(self.twist, dtype=np.float64).reshape(6)
        self.wrench = np.asarray(self.wrench, dtype=np.float64).reshape(6)


def pose_error(ref: Pose7, curr: Pose7):
    """6-vector tracking error: position delta and the rotation vector of
    R_ref * R_curr^T."""
    err = np.empty(6)
    err[:3] = ref.position - curr.position
    if np.array_equal(ref.rotation, curr.rotation):
        err[3:] = 0.0
    else:
        rel = Rotation.from_rotvec(ref.rotation) * Rotation.from_rotvec(curr.rotation).inv()
        err[3:] = rel.as_rotvec()
    return err


def apply_pose_offset(ref: Pose7, delta):
    """Offset a pose by a 6-vector (gripper untouched); exact when delta=0."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    position = ref.position + delta[:3]
    if np.any(delta[3:]):
        rotation = (Rotation.from_rotvec(delta[3:]) * Rotation.from_rotvec(ref.rotation)).as_rotvec()
    else:
        rotation = ref.rotation
    return Pose7(position, rotation, ref.gripper)


def attractor_wrench(x_ref: Pose7, x_curr: Pose7, xdot, stiffness, damping):
    """F_attr = K (x_ref - x_curr) - D xdot on the 6D pose error."""
    err = pose_error(x_ref, x_curr)
    return np.asarray(stiffness) * err - np.asarray(damping) * np.asarray(xdot)


def mix_wrench(f_attr, f_ext, k_f):
    """Convex blend (1 - k_f) F_attr + k_f F_ext; k_f scalar or per-axis."""
    kf = np.asarray(k_f, dtype=np.float64)
    if np.any(kf < 0) or np.any(kf > 1):
        raise ConfigError("k_f must lie in [0, 1]")
    return (1.0 - kf) * np.asarray(f_attr) + kf * np.asarray(f_ext)


def compliance_offset(f_virt, admittance):
    """Diagonal micro-admittance: delta_x = A F_virt."""
    return np.asarray(admittance) * np.asarray(f_virt)


def impedance_step(x_ref: Pose7, state: RobotState, params: ImpedanceParams) -> Pose7:
    """One execution-layer tick: compliant pose command from the reference.

    The gripper channel passes through unmodified."""
    f_attr = attractor_wrench(x_ref, state.pose, state.twist, params.stiffness, params.damping)
    f_virt = mix_wrench(f_attr, state.wrench, params.k_f)
    delta = compliance_offset(f_virt, params.admittance)
    return apply_pose_offset(x_ref, delta)
