"""Binary and text file formats.

MCLIP (motion clip), little-endian:

    header  "MCLP" u16 version u16 fps u32 frames u16 motion_dim
            u16 keypoint_count u16 style 7 x f32 root offset
    frame   motion_dim x f32, keypoint_count x 2 x f32,
            2 x u8 hand validity, u8 keypoint validity

FEAT (audio features, reference vectors, heatmaps), little-endian:

    "FEAT" u32 rows u32 cols f32 fps, then rows x cols f32
"""

from __future__ import annotations

import csv
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from hand_motion_dit.errors import (
    BadMagicError,
    ClipCapacityError,
    FileFormatError,
    TruncatedFileError,
)
from hand_motion_dit.kinematics import (
    LEFT_QUATERNIONS,
    MOTION_VALUES,
    RIGHT_QUATERNIONS,
    canonicalize,
)

logger = logging.getLogger(__name__)

CLIP_MAGIC = b"MCLP"
CLIP_VERSION = 1
CLIP_HEADER = struct.Struct("<4sHHIHHH7f")

FEAT_MAGIC = b"FEAT"
FEAT_HEADER = struct.Struct("<4sIIf")


def _identity_offset() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


@dataclass
class MotionClip:
    fps: int
    motion: np.ndarray
    """(F, 134) packed hand parameters."""

    keypoints: np.ndarray
    """(F, K, 2) upper-body keypoints in [0, 1] image coordinates."""

    hand_valid: np.ndarray
    """(F, 2) per-hand annotation flags."""

    keypoint_valid: np.ndarray
    """(F,) keypoint annotation flags."""

    style: int = 0
    root_offset: np.ndarray = field(default_factory=_identity_offset)
    reference: Optional[str] = None
    """Id of the reference-context vector, resolved by the dataset reader."""

    @property
    def frames(self) -> int:
        return self.motion.shape[0]

    @property
    def keypoint_count(self) -> int:
        return self.keypoints.shape[1]

    @property
    def dim(self) -> int:
        return MOTION_VALUES + 2 * self.keypoint_count

    def frame_vectors(self) -> np.ndarray:
        """(F, 134 + 2K) motion values followed by flattened keypoints."""
        return np.concatenate(
            [self.motion, self.keypoints.reshape(self.frames, -1)], axis=1
        )

    @classmethod
    def from_frame_vectors(
        cls,
        vectors: np.ndarray,
        fps: int,
        keypoint_count: int,
        hand_valid: Optional[np.ndarray] = None,
        keypoint_valid: Optional[np.ndarray] = None,
        **kwargs,
    ) -> MotionClip:
        """Split generated frame vectors back into a clip, canonicalising the
        quaternion slots."""
        vectors = np.asarray(vectors, dtype=np.float64)
        frames = len(vectors)
        motion = canonicalize_motion(vectors[:, :MOTION_VALUES])
        keypoints = vectors[:, MOTION_VALUES:].reshape(frames, keypoint_count, 2)
        return cls(
            fps=fps,
            motion=motion,
            keypoints=keypoints,
            hand_valid=(
                np.ones((frames, 2), dtype=bool) if hand_valid is None else hand_valid
            ),
            keypoint_valid=(
                np.ones(frames, dtype=bool) if keypoint_valid is None else keypoint_valid
            ),
            **kwargs,
        )


def canonicalize_motion(motion: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Canonicalise every quaternion slot of packed motion, normalising first
    unless `normalize` is False."""
    out = np.array(motion, dtype=np.float64)
    for slots in (LEFT_QUATERNIONS, RIGHT_QUATERNIONS):
        q = out[..., slots].reshape(out.shape[:-1] + (16, 4))
        if normalize:
            norms = np.linalg.norm(q, axis=-1, keepdims=True)
            q = q / np.where(norms > 0, norms, 1.0)
        out[..., slots] = canonicalize(q).reshape(out.shape[:-1] + (64,))
    return out


def _frame_dtype(motion_dim: int, keypoint_count: int) -> np.dtype:
    fields: list = [("motion", "<f4", (motion_dim,))]
    if keypoint_count:
        fields.append(("keypoints", "<f4", (keypoint_count, 2)))
    fields += [("hands", "u1", (2,)), ("keypoint_valid", "u1")]
    return np.dtype(fields)


def encode_clip(clip: MotionClip) -> bytes:
    k = clip.keypoint_count
    header = CLIP_HEADER.pack(
        CLIP_MAGIC,
        CLIP_VERSION,
        clip.fps,
        clip.frames,
        clip.motion.shape[1],
        k,
        clip.style,
        *np.asarray(clip.root_offset, dtype=np.float32).tolist(),
    )
    records = np.zeros(clip.frames, dtype=_frame_dtype(clip.motion.shape[1], k))
    records["motion"] = clip.motion
    if k:
        records["keypoints"] = clip.keypoints
    records["hands"] = clip.hand_valid
    records["keypoint_valid"] = clip.keypoint_valid
    return header + records.tobytes()


def save_clip(path: Path | str, clip: MotionClip) -> None:
    Path(path).write_bytes(encode_clip(clip))


def decode_clip(
    data: bytes, name: str = "<memory>", capacity: Optional[int] = None, canonical: bool = True
) -> MotionClip:
    """Parse an MCLIP buffer. Quaternion signs are canonicalised unless
    `canonical` is False, which keeps the values as stored."""
    if len(data) < 4:
        raise TruncatedFileError(name, "magic", len(data))
    if data[:4] != CLIP_MAGIC:
        raise BadMagicError(name, CLIP_MAGIC, data[:4])
    if len(data) < CLIP_HEADER.size:
        raise TruncatedFileError(name, "header", len(data))

    _, version, fps, frames, motion_dim, k, style, *offset = CLIP_HEADER.unpack_from(data)
    if version != CLIP_VERSION:
        raise FileFormatError(name, f"unsupported version {version}", offset=4)
    if motion_dim != MOTION_VALUES:
        raise FileFormatError(
            name, f"motion_dim is {motion_dim}, expected {MOTION_VALUES}", offset=12
        )
    if capacity is not None and frames > capacity:
        raise ClipCapacityError(name, frames, capacity)

    dtype = _frame_dtype(motion_dim, k)
    available = (len(data) - CLIP_HEADER.size) // dtype.itemsize
    if available < frames:
        raise TruncatedFileError(
            name, f"frame {available}", CLIP_HEADER.size + available * dtype.itemsize
        )
    end = CLIP_HEADER.size + frames * dtype.itemsize
    if len(data) != end:
        raise FileFormatError(name, f"{len(data) - end} trailing bytes", offset=end)

    records = np.frombuffer(data, dtype=dtype, count=frames, offset=CLIP_HEADER.size)
    motion = records["motion"].astype(np.float64)
    if not np.isfinite(motion).all():
        bad = int(np.argwhere(~np.isfinite(motion))[0, 0])
        raise FileFormatError(
            name, f"non-finite motion value in frame {bad}", CLIP_HEADER.size + bad * dtype.itemsize
        )
    keypoints = (
        records["keypoints"].astype(np.float64) if k else np.zeros((frames, 0, 2))
    )
    return MotionClip(
        fps=fps,
        motion=canonicalize_motion(motion, normalize=False) if canonical else motion,
        keypoints=keypoints,
        hand_valid=records["hands"].astype(bool),
        keypoint_valid=records["keypoint_valid"].astype(bool),
        style=style,
        root_offset=np.array(offset, dtype=np.float64),
    )


def load_clip(
    path: Path | str, capacity: Optional[int] = None, canonical: bool = True
) -> MotionClip:
    path = Path(path)
    logger.debug("loading clip %s", path)
    return decode_clip(path.read_bytes(), str(path), capacity, canonical)


@dataclass
class AudioFeatureTrack:
    fps: float
    features: np.ndarray
    """(rows, audio_dim) feature matrix."""

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def save_features(path: Path | str, features: np.ndarray, fps: float = 0.0) -> None:
    features = np.atleast_2d(np.asarray(features))
    rows, cols = features.shape
    header = FEAT_HEADER.pack(FEAT_MAGIC, rows, cols, fps)
    Path(path).write_bytes(header + features.astype("<f4").tobytes())


def load_features(path: Path | str) -> AudioFeatureTrack:
    name = str(path)
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(name, "magic", len(data))
    if data[:4] != FEAT_MAGIC:
        raise BadMagicError(name, FEAT_MAGIC, data[:4])
    if len(data) < FEAT_HEADER.size:
        raise TruncatedFileError(name, "header", len(data))
    _, rows, cols, fps = FEAT_HEADER.unpack_from(data)
    end = FEAT_HEADER.size + rows * cols * 4
    if len(data) < end:
        complete = (len(data) - FEAT_HEADER.size) // (4 * cols) if cols else 0
        raise TruncatedFileError(
            name, f"row {complete}", FEAT_HEADER.size + complete * cols * 4
        )
    if len(data) != end:
        raise FileFormatError(name, f"{len(data) - end} trailing bytes", offset=end)
    matrix = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=FEAT_HEADER.size)
    matrix = matrix.reshape(rows, cols).astype(np.float64)
    if not np.isfinite(matrix).all():
        raise FileFormatError(name, "non-finite feature value", offset=FEAT_HEADER.size)
    return AudioFeatureTrack(float(fps), matrix)


def write_pgm(path: Path | str, image: np.ndarray) -> None:
    """Binary greyscale image; values in [0, 1] map to 0..255."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    name = str(path)
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FileFormatError(name, "not a binary PGM image", offset=0)
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise TruncatedFileError(name, "pixels", len(data))
    return pixels.reshape(h, w).astype(np.float64) / maxval


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
