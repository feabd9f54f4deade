"""Pose and motion clip containers.

A pose is a flat vector [yaw_velocity, xz_velocity(2), height, J x rot6d]
of dimension 4 + 6J. Root features are per-frame velocities in the
character-local frame. A clip is a stack of poses at a fixed frame rate
plus a three-way joint partition (upper / lower / hands).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .rotations import check_rotation, matrix_from_rot6d

DEFAULT_FPS = 30.0
ROOT_DIM = 4
PARTS = ("upper", "hands", "lower")


def pose_dim(n_joints: int) -> int:
    return ROOT_DIM + 6 * n_joints


def joint_columns(j: int) -> slice:
    return slice(ROOT_DIM + 6 * j, ROOT_DIM + 6 * (j + 1))


def default_part_masks(n_joints: int) -> dict[str, np.ndarray]:
    """Three-way partition of joint indices for an abstract skeleton.

    Hands take the last ~quarter of the joints, lower body the couple before
    those, upper body the rest. J=16 gives the 10/2/4 default split.
    """
    if n_joints < 3:
        raise ConfigError(f"need at least 3 joints to partition, got {n_joints}")
    n_hands = max(1, round(n_joints / 4))
    n_lower = max(1, round(n_joints / 8))
    n_upper = n_joints - n_hands - n_lower
    if n_upper < 1:
        raise ConfigError(f"skeleton with {n_joints} joints leaves no upper-body joints")
    return {
        "upper": np.arange(0, n_upper),
        "lower": np.arange(n_upper, n_upper + n_lower),
        "hands": np.arange(n_upper + n_lower, n_joints),
    }


def validate_part_masks(masks: dict[str, np.ndarray], n_joints: int) -> None:
    if set(masks) != set(PARTS):
        raise ConfigError(f"part masks must cover exactly {PARTS}, got {sorted(masks)}")
    seen = np.concatenate([np.asarray(masks[p], dtype=np.int64) for p in PARTS])
    if len(np.unique(seen)) != len(seen):
        raise ConfigError("part masks overlap")
    if sorted(seen.tolist()) != list(range(n_joints)):
        raise ConfigError(f"part masks do not cover joints 0..{n_joints - 1}")


@dataclass(frozen=True)
class PoseVector:
    """One frame; wraps the flat (4 + 6J,) array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 1 or (arr.size - ROOT_DIM) % 6 != 0 or arr.size < ROOT_DIM + 6:
            raise ShapeError(f"pose vector must have size 4 + 6J, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def n_joints(self) -> int:
        return (self.data.size - ROOT_DIM) // 6

    @property
    def root_yaw_velocity(self) -> float:
        return float(self.data[0])

    @property
    def root_xz_velocity(self) -> np.ndarray:
        return self.data[1:3]

    @property
    def root_height(self) -> float:
        return float(self.data[3])

    def joint_rot6d(self, j: int) -> np.ndarray:
        return self.data[joint_columns(j)]

    def validate_rotations(self) -> None:
        """Check every joint block recovers a proper rotation matrix."""
        for j in range(self.n_joints):
            R = matrix_from_rot6d(self.joint_rot6d(j))
            check_rotation(R)


@dataclass(frozen=True)
class MotionClip:
    """Fixed-rate pose sequence with a joint partition."""

    frames: np.ndarray  # (N, 4 + 6J) float32
    frame_rate: float = DEFAULT_FPS
    part_masks: dict[str, np.ndarray] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 2 or (arr.shape[1] - ROOT_DIM) % 6 != 0 or arr.shape[1] < ROOT_DIM + 6:
            raise ShapeError(f"frames must be (N, 4 + 6J), got {arr.shape}")
        if self.frame_rate <= 0:
            raise ConfigError(f"frame_rate must be positive, got {self.frame_rate}")
        n_joints = (arr.shape[1] - ROOT_DIM) // 6
        masks = self.part_masks or default_part_masks(n_joints)
        masks = {p: np.asarray(masks[p], dtype=np.int64) for p in PARTS}
        validate_part_masks(masks, n_joints)
        arr.flags.writeable = False
        for m in masks.values():
            m.flags.writeable = False
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "part_masks", masks)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return (self.frames.shape[1] - ROOT_DIM) // 6

    @property
    def duration(self) -> float:
        return self.n_frames / self.frame_rate

    def pose(self, i: int) -> PoseVector:
        return PoseVector(self.frames[i])

    def part_feature_columns(self, part: str) -> np.ndarray:
        """Feature columns for one body part's codec.

        The 4 root channels ride with the lower-body part so they are
        decoded exactly once.
        """
        if part not in PARTS:
            raise ConfigError(f"unknown part {part!r}")
        cols = [np.arange(ROOT_DIM)] if part == "lower" else []
        for j in self.part_masks[part]:
            cols.append(np.arange(joint_columns(int(j)).start, joint_columns(int(j)).stop))
        return np.concatenate(cols)

    def part_features(self, part: str) -> np.ndarray:
        return self.frames[:, self.part_feature_columns(part)]

    def joint_rotmats(self) -> np.ndarray:
        """All joint rotations as (N, J, 3, 3) via Gram-Schmidt."""
        n, j = self.n_frames, self.n_joints
        flat = self.frames[:, ROOT_DIM:].reshape(n * j, 6).astype(np.float64)
        from .rotations import matrix_from_rot6d as m6

        return m6(flat).reshape(n, j, 3, 3)


def clip_from_part_features(
    parts: dict[str, np.ndarray],
    n_joints: int,
    frame_rate: float = DEFAULT_FPS,
    part_masks: dict[str, np.ndarray] | None = None,
) -> MotionClip:
    """Inverse of per-part slicing: reassemble a full-body clip."""
    masks = part_masks or default_part_masks(n_joints)
    lengths = {p: parts[p].shape[0] for p in PARTS}
    if len(set(lengths.values())) != 1:
        raise ShapeError(f"part feature lengths disagree: {lengths}")
    n = lengths["upper"]
    frames = np.zeros((n, pose_dim(n_joints)), dtype=np.float32)
    for part in PARTS:
        cols = [np.arange(ROOT_DIM)] if part == "lower" else []
        for j in masks[part]:
            cols.append(np.arange(joint_columns(int(j)).start, joint_columns(int(j)).stop))
        idx = np.concatenate(cols)
        feats = np.asarray(parts[part], dtype=np.float32)
        if feats.shape[1] != idx.size:
            raise ShapeError(
                f"part {part!r} features have {feats.shape[1]} columns, expected {idx.size}"
            )
        frames[:, idx] = feats
    return MotionClip(frames=frames, frame_rate=frame_rate, part_masks=masks)
