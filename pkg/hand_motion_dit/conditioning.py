"""Clip-level conditioning signals and the embeddings that add them to the
timestep embedding.

Amplitude is the variance of a hand's translation over its valid frames,
soft-quantised into buckets with a triangular kernel. Style ids index a dense
table named in the dataset manifest. The root offset and an optional
reference-context vector are linear projections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from hand_motion_dit import autodiff as ad
from hand_motion_dit.errors import (
    DimensionError,
    FileFormatError,
    InvalidConfigError,
    UndefinedAmplitudeError,
    UnknownStyleError,
)
from hand_motion_dit.kinematics import HANDS, LEFT_TRANSLATION, RIGHT_TRANSLATION, canonicalize

if TYPE_CHECKING:
    from hand_motion_dit.formats import MotionClip

logger = logging.getLogger(__name__)

DEFAULT_STYLES = ("speaking", "singing", "gesture-dance")
OFFSET_VALUES = 7
IDENTITY_OFFSET = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class BucketSpec:
    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        r = np.asarray(self.radii, dtype=np.float64)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        if c.ndim != 1 or c.shape != r.shape or len(c) == 0:
            raise InvalidConfigError("buckets", "centers and radii must be equal-length lists")
        if np.any(np.diff(c) <= 0):
            raise InvalidConfigError("buckets", "centers must be strictly ascending")
        if np.any(r <= 0):
            raise InvalidConfigError("buckets", "radii must be positive")
        # Adjacent supports must overlap or there is a value with no activation.
        gaps = np.diff(c)
        if np.any(r[:-1] + r[1:] <= gaps):
            raise InvalidConfigError("buckets", "bucket supports leave a gap")

    def __len__(self) -> int:
        return len(self.centers)


def default_bucket_spec(count: int = 8, low: float = 1e-4, high: float = 1e-1) -> BucketSpec:
    """Geometric centers from `low` to `high`; each radius is the gap to the next
    center, the last one the gap to the previous."""
    if count == 1:
        return BucketSpec(np.array([low]), np.array([high - low if high > low else low]))
    centers = np.geomspace(low, high, count)
    gaps = np.diff(centers)
    return BucketSpec(centers, np.concatenate([gaps, gaps[-1:]]))


def bucket_encode(value: float, spec: BucketSpec) -> np.ndarray:
    """Triangular activations around each center. Values are clamped into
    [centers[0], centers[-1]] first, so anything below the first center
    encodes as the first center and the result stays continuous."""
    v = float(np.clip(value, spec.centers[0], spec.centers[-1]))
    return np.maximum(0.0, 1.0 - np.abs(v - spec.centers) / spec.radii)


def translation_amplitude(translation: np.ndarray, valid: np.ndarray, hand: str = "") -> float:
    """Mean over the axes of the per-axis variance of `translation` (F, 3)
    across the frames flagged in `valid`."""
    rows = np.asarray(translation)[np.asarray(valid, dtype=bool)]
    if len(rows) < 2:
        raise UndefinedAmplitudeError(hand, len(rows))
    return float(rows.var(axis=0).mean())


def amplitude_of(clip: MotionClip, hand: str) -> float:
    slots = LEFT_TRANSLATION if hand == "left" else RIGHT_TRANSLATION
    return translation_amplitude(
        clip.motion[:, slots], clip.hand_valid[:, HANDS.index(hand)], hand
    )


def clip_amplitudes(clip: MotionClip) -> np.ndarray:
    """Both amplitudes, 0.0 where one is undefined (bucket 0 after clamping)."""
    out = np.zeros(2)
    for i, hand in enumerate(HANDS):
        try:
            out[i] = amplitude_of(clip, hand)
        except UndefinedAmplitudeError as e:
            logger.info("%s; using bucket 0", e)
    return out


def derive_hand_masks(presence: np.ndarray, length: int, capacity: int) -> np.ndarray:
    """(capacity, 2) bits: annotated and inside the clip."""
    presence = np.asarray(presence, dtype=bool)
    out = np.zeros((capacity, 2), dtype=bool)
    n = min(length, capacity, len(presence))
    out[:n] = presence[:n]
    return out


def offset_vector(translation: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [np.asarray(translation, dtype=np.float64), canonicalize(rotation)]
    )


def reference_context(path: Optional[Path], ref_dim: Optional[int] = None) -> Optional[np.ndarray]:
    """Read a single-row FEAT file. A missing file means no reference."""
    if path is None or not Path(path).exists():
        return None
    from hand_motion_dit.formats import load_features

    track = load_features(path)
    if track.features.shape[0] != 1:
        raise FileFormatError(str(path), f"expected one row, found {track.features.shape[0]}")
    vector = track.features[0]
    if ref_dim is not None and len(vector) != ref_dim:
        raise FileFormatError(str(path), f"expected {ref_dim} values, found {len(vector)}")
    return vector


@dataclass
class StyleTable:
    names: list[str] = field(default_factory=lambda: list(DEFAULT_STYLES))

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownStyleError(name, self.names)

    def name_of(self, style: int) -> str:
        if not 0 <= style < len(self.names):
            raise UnknownStyleError(style, self.names)
        return self.names[style]

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class ConditionBundle:
    audio: np.ndarray
    """(capacity, audio_dim) features aligned to the motion frames."""

    audio_mask: np.ndarray
    """(capacity,) True where an audio row exists."""

    style: int
    amplitude: np.ndarray
    """(2,) left and right amplitude, >= 0."""

    root_offset: np.ndarray
    """(7,) root translation then w-first quaternion."""

    hand_mask: np.ndarray
    """(capacity, 2) per-hand validity."""

    reference: Optional[np.ndarray] = None


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, shape)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class StyleEmbedding:
    def __init__(self, style_count: int, hidden: int, rng: np.random.Generator):
        self.table = ad.parameter(_normal(rng, (style_count, hidden)), "style")

    def params(self) -> dict[str, ad.NdArray]:
        return {"style": self.table}

    def __call__(self, styles: Sequence[int]) -> ad.NdArray:
        return ad.embedding_lookup(self.table, np.asarray(styles))


class BucketEmbedding:
    """One table per hand, weighted by that hand's bucket activations."""

    def __init__(self, spec: BucketSpec, hidden: int, rng: np.random.Generator):
        self.spec = spec
        self.left = ad.parameter(_normal(rng, (len(spec), hidden)), "speed.left")
        self.right = ad.parameter(_normal(rng, (len(spec), hidden)), "speed.right")

    def params(self) -> dict[str, ad.NdArray]:
        return {"speed.left": self.left, "speed.right": self.right}

    def activations(self, amplitudes: np.ndarray) -> np.ndarray:
        """(B, 2, bucket_count) for (B, 2) amplitudes."""
        amplitudes = np.atleast_2d(amplitudes)
        return np.array(
            [[bucket_encode(a, self.spec) for a in row] for row in amplitudes]
        )

    def __call__(self, amplitudes: np.ndarray) -> ad.NdArray:
        act = self.activations(amplitudes)
        return ad.add(
            ad.matmul(ad.constant(act[:, 0]), self.left),
            ad.matmul(ad.constant(act[:, 1]), self.right),
        )


class OffsetEmbedding:
    def __init__(self, hidden: int, rng: np.random.Generator):
        self.weight = ad.parameter(_xavier(rng, OFFSET_VALUES, hidden), "offset.weight")
        self.bias = ad.parameter(np.zeros(hidden), "offset.bias")

    def params(self) -> dict[str, ad.NdArray]:
        return {"offset.weight": self.weight, "offset.bias": self.bias}

    def __call__(self, offsets: np.ndarray) -> ad.NdArray:
        offsets = np.atleast_2d(offsets)
        if offsets.shape[-1] != OFFSET_VALUES:
            raise DimensionError("offset_embedding", offsets.shape, (OFFSET_VALUES,))
        return ad.add(ad.matmul(ad.constant(offsets), self.weight), self.bias)


class ReferenceEmbedding:
    """Projection of an externally encoded reference vector. Clips without one
    contribute zero."""

    def __init__(self, ref_dim: int, hidden: int, rng: np.random.Generator):
        self.ref_dim = ref_dim
        self.weight = ad.parameter(_xavier(rng, ref_dim, hidden), "reference.weight")
        self.bias = ad.parameter(np.zeros(hidden), "reference.bias")

    def params(self) -> dict[str, ad.NdArray]:
        return {"reference.weight": self.weight, "reference.bias": self.bias}

    def __call__(self, references: Sequence[Optional[np.ndarray]]) -> ad.NdArray:
        hidden = self.bias.shape[0]
        vectors = np.zeros((len(references), self.ref_dim))
        present = np.zeros((len(references), hidden))
        for i, ref in enumerate(references):
            if ref is None:
                continue
            if np.shape(ref) != (self.ref_dim,):
                raise DimensionError("reference_context", np.shape(ref), (self.ref_dim,))
            vectors[i] = ref
            present[i] = 1.0
        projected = ad.add(ad.matmul(ad.constant(vectors), self.weight), self.bias)
        return ad.mul(projected, ad.constant(present))
