"""Hand parameter representation and a simplified skeletal hand.

Rotations are unit quaternions stored w-first and kept in a canonical
double-cover representative: w >= 0, and when w == 0 the first nonzero of
(x, y, z) is positive. Both hands are packed into 134 values per frame:

    [left 16x4 quaternions, left translation, right 16x4 quaternions, right translation]

Functions accept arrays with arbitrary leading axes, so whole sequences can
be converted without Python loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from hand_motion_dit.errors import (
    Collector,
    InvalidConfigError,
    MotionLengthError,
    QuaternionNormWarning,
)

JOINT_COUNT = 16
HAND_VALUES = JOINT_COUNT * 4 + 3
MOTION_VALUES = 2 * HAND_VALUES

LEFT_QUATERNIONS = slice(0, 64)
LEFT_TRANSLATION = slice(64, 67)
RIGHT_QUATERNIONS = slice(67, 131)
RIGHT_TRANSLATION = slice(131, 134)

HANDS = ("left", "right")

NORM_WARNING_TOLERANCE = 1e-3
NORM_RENORMALIZE_TOLERANCE = 1e-9


def canonicalize(q: np.ndarray) -> np.ndarray:
    """Pick the canonical representative of +q / -q."""
    q = np.asarray(q, dtype=np.float64)
    flip = q[..., 0] < 0
    zero_w = q[..., 0] == 0
    if zero_w.any():
        v = q[..., 1:]
        nonzero = v != 0
        first = np.argmax(nonzero, axis=-1)
        lead = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
        flip = flip | (zero_w & (lead < 0))
    return np.where(flip[..., None], -q, q)


def axis_angle_to_quaternion(aa: np.ndarray) -> np.ndarray:
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    half = 0.5 * theta
    safe = np.where(theta > 1e-12, theta, 1.0)
    # sin(theta/2)/theta, with its Taylor limit near zero
    k = np.where(theta > 1e-12, np.sin(half) / safe, 0.5 - theta * theta / 48.0)
    q = np.concatenate([np.cos(half)[..., None], aa * k[..., None]], axis=-1)
    return canonicalize(q)


def quaternion_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = canonicalize(q / np.linalg.norm(q, axis=-1, keepdims=True))
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    theta = 2.0 * np.arctan2(s, w)
    safe = np.where(s > 1e-12, s, 1.0)
    k = np.where(s > 1e-12, theta / safe, 2.0 / np.where(w > 0, w, 1.0))
    return v * k[..., None]


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation angle between two unit quaternions, in radians."""
    a = np.asarray(a, dtype=np.float64)
    r = quaternion_multiply(a * np.array([1.0, -1.0, -1.0, -1.0]), b)
    # atan2 keeps small angles accurate where arccos of the dot product does not
    return 2.0 * np.arctan2(np.linalg.norm(r[..., 1:], axis=-1), np.abs(r[..., 0]))


@dataclass
class HandParams:
    joint_rotations: np.ndarray
    """(16, 4) unit quaternions, w-first, canonical."""

    translation: np.ndarray
    """(3,) root translation in dataset units."""

    @classmethod
    def identity(cls) -> HandParams:
        rotations = np.zeros((JOINT_COUNT, 4))
        rotations[:, 0] = 1.0
        return cls(rotations, np.zeros(3))


@dataclass
class HandPoseFrame:
    left: HandParams
    right: HandParams

    @classmethod
    def identity(cls) -> HandPoseFrame:
        return cls(HandParams.identity(), HandParams.identity())


def pack_frame(f: HandPoseFrame) -> np.ndarray:
    out = np.empty(MOTION_VALUES)
    out[LEFT_QUATERNIONS] = f.left.joint_rotations.reshape(-1)
    out[LEFT_TRANSLATION] = f.left.translation
    out[RIGHT_QUATERNIONS] = f.right.joint_rotations.reshape(-1)
    out[RIGHT_TRANSLATION] = f.right.translation
    return out


def _unpack_rotations(
    values: np.ndarray, hand: str, collector: Collector
) -> np.ndarray:
    q = np.array(values, dtype=np.float64).reshape(JOINT_COUNT, 4)
    norms = np.linalg.norm(q, axis=-1)
    for j in np.nonzero(np.abs(norms - 1.0) > NORM_RENORMALIZE_TOLERANCE)[0]:
        if abs(norms[j] - 1.0) > NORM_WARNING_TOLERANCE:
            collector.handle(QuaternionNormWarning(f"{hand}[{j}]", float(norms[j])))
        q[j] = q[j] / norms[j]
    return canonicalize(q)


def unpack_frame(v: np.ndarray, collector: Optional[Collector] = None) -> HandPoseFrame:
    if collector is None:
        collector = Collector.default
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (MOTION_VALUES,):
        raise MotionLengthError(v.size, MOTION_VALUES)
    return HandPoseFrame(
        HandParams(
            _unpack_rotations(v[LEFT_QUATERNIONS], "left", collector),
            v[LEFT_TRANSLATION].copy(),
        ),
        HandParams(
            _unpack_rotations(v[RIGHT_QUATERNIONS], "right", collector),
            v[RIGHT_TRANSLATION].copy(),
        ),
    )


def split_motion(motion: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-hand (rotations (..., 16, 4), translation (..., 3)) views of packed
    motion with any leading axes."""
    motion = np.asarray(motion)
    if motion.shape[-1] < MOTION_VALUES:
        raise MotionLengthError(motion.shape[-1], MOTION_VALUES)
    lead = motion.shape[:-1]
    return {
        "left": (
            motion[..., LEFT_QUATERNIONS].reshape(lead + (JOINT_COUNT, 4)),
            motion[..., LEFT_TRANSLATION],
        ),
        "right": (
            motion[..., RIGHT_QUATERNIONS].reshape(lead + (JOINT_COUNT, 4)),
            motion[..., RIGHT_TRANSLATION],
        ),
    }


def hand_translations(motion: np.ndarray) -> np.ndarray:
    """(..., 2, 3) left/right translations of packed motion."""
    motion = np.asarray(motion)
    return np.stack(
        [motion[..., LEFT_TRANSLATION], motion[..., RIGHT_TRANSLATION]], axis=-2
    )


def hand_position(f: HandPoseFrame) -> tuple[np.ndarray, np.ndarray]:
    return f.left.translation, f.right.translation


# Synthetic rest template: wrist at the origin, five fingers fanned in the
# xy-plane, three joints per finger.
FINGER_FAN_DEGREES = (-50.0, -20.0, 0.0, 18.0, 36.0)
BONE_LENGTHS = (0.09, 0.035, 0.025)


def _default_parents() -> list[int]:
    parents = [-1]
    for finger in range(5):
        base = 1 + 3 * finger
        parents += [0, base, base + 1]
    return parents


def _default_offsets() -> np.ndarray:
    offsets = np.zeros((JOINT_COUNT, 3))
    for finger, angle in enumerate(FINGER_FAN_DEGREES):
        direction = np.array(
            [math.sin(math.radians(angle)), math.cos(math.radians(angle)), 0.0]
        )
        for segment, length in enumerate(BONE_LENGTHS):
            offsets[1 + 3 * finger + segment] = length * direction
    return offsets


@dataclass
class HandSkeleton:
    parents: list[int] = field(default_factory=_default_parents)
    """Parent index per joint; the root has -1."""

    offsets: np.ndarray = field(default_factory=_default_offsets)
    """(16, 3) rest offset of each joint from its parent."""

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if len(self.parents) != JOINT_COUNT or self.offsets.shape != (JOINT_COUNT, 3):
            raise InvalidConfigError("skeleton", "a hand skeleton has exactly 16 joints")
        if self.parents[0] != -1:
            raise InvalidConfigError("skeleton", "joint 0 must be the root")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise InvalidConfigError(
                    "skeleton", f"joint {j} has parent {p}; parents must precede children"
                )

    def bones(self) -> list[tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]


def forward_kinematics(
    rotations: np.ndarray, translation: np.ndarray, skeleton: HandSkeleton
) -> np.ndarray:
    """Joint positions (..., 16, 3) for rotations (..., 16, 4) and root
    translation (..., 3).

    The root sits at the translation. Each child is its parent's position plus
    the parent's global rotation applied to the child's rest offset; global
    rotations compose down the tree.
    """
    local = quaternion_to_matrix(rotations)
    lead = local.shape[:-3]
    glob = np.empty(lead + (JOINT_COUNT, 3, 3))
    pos = np.empty(lead + (JOINT_COUNT, 3))
    glob[..., 0, :, :] = local[..., 0, :, :]
    pos[..., 0, :] = translation
    for j in range(1, JOINT_COUNT):
        p = skeleton.parents[j]
        pos[..., j, :] = pos[..., p, :] + glob[..., p, :, :] @ skeleton.offsets[j]
        glob[..., j, :, :] = glob[..., p, :, :] @ local[..., j, :, :]
    return pos


def hand_joints(h: HandParams, skeleton: HandSkeleton) -> np.ndarray:
    return forward_kinematics(h.joint_rotations, h.translation, skeleton)


def motion_joints(motion: np.ndarray, skeleton: HandSkeleton) -> np.ndarray:
    """(..., 2, 16, 3) joints of both hands for packed motion."""
    hands = split_motion(motion)
    return np.stack(
        [forward_kinematics(*hands[hand], skeleton) for hand in HANDS], axis=-3
    )
