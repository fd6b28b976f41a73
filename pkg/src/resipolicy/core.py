"""Shared domain types and action-space plumbing.

Conventions used throughout the package: positions in metres, rotations as
axis-angle 3-vectors (radians), gripper as a width in metres, wrenches as
(force [N], torque [N*m]) 6-vectors, timestamps in seconds from episode
start. Observations and actions live on a 10 Hz grid, wrench samples on a
60 Hz grid (exactly 6 per action step).
"""
from __future__ import annotations

import dataclasses

import numpy as np

OBS_HZ = 10
WRENCH_HZ = 60
WRENCH_PER_STEP = WRENCH_HZ // OBS_HZ
RANGE_FLOOR = 1e-8
ACTION_DIM = 7


class ConfigError(ValueError):
    """Invalid parameter values or malformed configuration."""


class AlignmentError(ValueError):
    """Multi-rate streams do not line up."""


class CodecError(ValueError):
    """Malformed episode file."""


def require_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def _vec(x, n, name):
    arr = np.asarray(x, dtype=np.float64).reshape(n)
    require_finite(arr, name)
    return arr


@dataclasses.dataclass(eq=False)
class Pose7:
    """End-effector target: position, axis-angle rotation, gripper width."""

    position: np.ndarray
    rotation: np.ndarray
    gripper: float

    def __post_init__(self):
        self.position = _vec(self.position, 3, "position")
        self.rotation = _vec(self.rotation, 3, "rotation")
        self.gripper = float(self.gripper)
        if not np.isfinite(self.gripper):
            raise ValueError("gripper must be finite")

    def validate(self):
        """Strict invariant check, applied at serialization boundaries."""
        if np.linalg.norm(self.rotation) > np.pi + 1e-12:
            raise ValueError("rotation magnitude exceeds pi")
        if self.gripper < 0:
            raise ValueError("gripper width must be nonnegative")
        return self

    def as_array(self):
        out = np.empty(ACTION_DIM)
        out[:3] = self.position
        out[3:6] = self.rotation
        out[6] = self.gripper
        return out

    @classmethod
    def from_array(cls, arr):
        arr = _vec(arr, ACTION_DIM, "pose array")
        return cls(arr[:3], arr[3:6], arr[6])


@dataclasses.dataclass(eq=False)
class Wrench:
    """Force/torque sample at the tool center point, with its timestamp."""

    force: np.ndarray
    torque: np.ndarray
    timestamp: float

    def __post_init__(self):
        self.force = _vec(self.force, 3, "force")
        self.torque = _vec(self.torque, 3, "torque")
        self.timestamp = float(self.timestamp)

    def as_array(self):
        return np.concatenate([self.force, self.torque])

    @classmethod
    def from_array(cls, arr, timestamp):
        arr = _vec(arr, 6, "wrench array")
        return cls(arr[:3], arr[3:], timestamp)


@dataclasses.dataclass(eq=False)
class TokenSet:
    """One observation: visual/tactile token matrices plus low-dim state.

    `wrench` is the 6D force/torque sample synchronized with this
    observation; it drives both the contact gate and the residual branch.
    """

    visual_tokens: np.ndarray
    tactile_tokens: np.ndarray
    proprio: np.ndarray
    wrench: np.ndarray
    timestamp: float

    def __post_init__(self):
        self.visual_tokens = np.asarray(self.visual_tokens, dtype=np.float64)
        self.tactile_tokens = np.asarray(self.tactile_tokens, dtype=np.float64)
        self.proprio = np.asarray(self.proprio, dtype=np.float64).reshape(-1)
        self.wrench = _vec(self.wrench, 6, "wrench")
        self.timestamp = float(self.timestamp)
        if self.visual_tokens.ndim != 2 or self.tactile_tokens.ndim != 2:
            raise ValueError("token matrices must be 2-D")
        require_finite(self.visual_tokens, "visual_tokens")
        require_finite(self.tactile_tokens, "tactile_tokens")
        require_finite(self.proprio, "proprio")


@dataclasses.dataclass(eq=False)
class ActionChunk:
    """A fixed-horizon block of 7D end-effector targets."""

    steps: np.ndarray
    start_step_index: int = 0
    normalized: bool = False

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.steps.ndim != 2 or self.steps.shape[1] != ACTION_DIM:
            raise ValueError(f"chunk must be (H, {ACTION_DIM}), got {self.steps.shape}")
        if self.steps.shape[0] < 1:
            raise ValueError("chunk horizon must be positive")
        require_finite(self.steps, "chunk steps")
        self.start_step_index = int(self.start_step_index)

    @property
    def horizon(self):
        return self.steps.shape[0]


@dataclasses.dataclass(eq=False)
class Normalizer:
    """Per-dimension affine map between raw actions and [-1, 1].

    lo maps to -1 and hi to +1; inputs outside [lo, hi] map outside of
    [-1, 1] and are deliberately not clamped, so out-of-distribution
    actions stay visible downstream.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = _vec(self.lo, ACTION_DIM, "lo")
        self.hi = _vec(self.hi, ACTION_DIM, "hi")
        span = self.hi - self.lo
        if np.any(span < RANGE_FLOOR):
            bad = int(np.argmin(span))
            raise ConfigError(
                f"normalizer range {span[bad]:.3e} on dimension {bad} is below "
                f"the {RANGE_FLOOR:.0e} floor"
            )

    @classmethod
    def from_actions(cls, actions):
        """Min/max scan over pooled raw actions; degenerate dimensions are
        expanded symmetrically to the range floor."""
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim != 2 or actions.shape[1] != ACTION_DIM:
            raise ValueError("actions must be (N, 7)")
        if actions.shape[0] == 0:
            raise ValueError("cannot fit a normalizer to an empty action set")
        lo = actions.min(axis=0)
        hi = actions.max(axis=0)
        narrow = (hi - lo) < RANGE_FLOOR
        mid = 0.5 * (hi + lo)
        lo = np.where(narrow, mid - 0.5 * RANGE_FLOOR, lo)
        hi = np.where(narrow, mid + 0.5 * RANGE_FLOOR, hi)
        return cls(lo, hi)

    def normalize_array(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        return 2.0 * (raw - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize_array(self, norm):
        norm = np.asarray(norm, dtype=np.float64)
        return (norm + 1.0) * 0.5 * (self.hi - self.lo) + self.lo

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lo"]), np.asarray(d["hi"]))


def normalize(chunk: ActionChunk, n: Normalizer) -> ActionChunk:
    """Map a raw chunk into normalized action space (no clamping)."""
    if chunk.normalized:
        raise ValueError("chunk is already normalized")
    return ActionChunk(n.normalize_array(chunk.steps), chunk.start_step_index, normalized=True)


def denormalize(chunk: ActionChunk, n: Normalizer) -> ActionChunk:
    """Inverse of normalize; round-trips within 1e-9 per entry."""
    if not chunk.normalized:
        raise ValueError("chunk is not normalized")
    return ActionChunk(n.denormalize_array(chunk.steps), chunk.start_step_index, normalized=False)


def align_wrench_windows(wrench_stream, n_action_steps):
    """Partition a 60 Hz wrench stream into one 6-sample window per action step.

    Windows are left-open/right-closed 0.1 s intervals, so a sample whose
    timestamp coincides with an action-step boundary belongs to the earlier
    window. The window origin is inferred from the first sample's timestamp
    minus one wrench period.
    """
    wrench_stream = list(wrench_stream)
    n_action_steps = int(n_action_steps)
    expected = WRENCH_PER_STEP * n_action_steps
    if len(wrench_stream) != expected:
        raise AlignmentError(
            f"expected {expected} wrench samples for {n_action_steps} action "
            f"steps, got {len(wrench_stream)}"
        )
    if n_action_steps == 0:
        return []
    step_dt = WRENCH_PER_STEP / WRENCH_HZ
    t_base = wrench_stream[0].timestamp - 1.0 / WRENCH_HZ
    windows = [[] for _ in range(n_action_steps)]
    for w in wrench_stream:
        rel = w.timestamp - t_base
        idx = int(np.ceil(rel / step_dt - 1e-9)) - 1
        if idx < 0 or idx >= n_action_steps:
            raise AlignmentError(
                f"wrench sample at t={w.timestamp!r} falls outside the "
                f"{n_action_steps}-step span starting at t={t_base!r}"
            )
        windows[idx].append(w)
    for i, win in enumerate(windows):
        if len(win) != WRENCH_PER_STEP:
            raise AlignmentError(
                f"window {i} holds {len(win)} samples, expected {WRENCH_PER_STEP}"
            )
    return windows


def window_matrix(window):
    """Stack one wrench window into a (6, 6) array (rows = samples)."""
    return np.stack([w.as_array() for w in window])
