"""Signals prepared for a second, image-space stage.

Keypoint tracks are smoothed with a large temporal median filter, then
rasterised into one Gaussian map per keypoint. Hands are rendered as
skeletal line drawings, one channel per hand. The confidence embedding and
the pose-discriminator loss are the trainable pieces that consume them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hand_motion_dit import autodiff as ad
from hand_motion_dit.diffusion import NoiseSchedule, predict_x0
from hand_motion_dit.errors import (
    Collector,
    DimensionError,
    EvenKernelError,
    ScoreClampedWarning,
)
from hand_motion_dit.formats import MotionClip, load_features, save_features, write_pgm
from hand_motion_dit.kinematics import (
    HANDS,
    HandPoseFrame,
    HandSkeleton,
    hand_joints,
    unpack_frame,
)

logger = logging.getLogger(__name__)

DEFAULT_KERNEL = 31
DEFAULT_SIGMA_PX = 2.0
PD_WEIGHT = 0.1


@dataclass
class KeypointTrack:
    coords: np.ndarray
    """(F, K, 2) image coordinates in [0, 1]."""

    valid: np.ndarray
    """(F,) frame validity."""

    @classmethod
    def from_clip(cls, clip: MotionClip) -> KeypointTrack:
        return cls(clip.keypoints.copy(), clip.keypoint_valid.astype(bool))

    @property
    def frames(self) -> int:
        return self.coords.shape[0]


def temporal_median_filter(track: KeypointTrack, kernel: int = DEFAULT_KERNEL) -> KeypointTrack:
    """Sliding median along time for every joint coordinate.

    Windows replicate the edge frames. Invalid frames do not take part in
    any window; an output frame whose window holds no valid frame is invalid.
    With an even number of valid entries the two middle values are averaged.
    """
    if kernel < 3 or kernel % 2 == 0:
        raise EvenKernelError(kernel)
    coords = np.asarray(track.coords, dtype=np.float64)
    valid = np.asarray(track.valid, dtype=bool)
    if coords.shape[0] == 0:
        return KeypointTrack(coords.copy(), valid.copy())

    half = kernel // 2
    values = np.where(valid[:, None, None], coords, np.nan)
    padded = np.pad(values, ((half, half), (0, 0), (0, 0)), mode="edge")
    windows = sliding_window_view(padded, kernel, axis=0)  # (F, K, 2, kernel)

    ordered = np.sort(windows, axis=-1)  # NaN sorts last
    count = (~np.isnan(windows)).sum(axis=-1)
    lo = np.maximum(count - 1, 0) // 2
    hi = count // 2
    a = np.take_along_axis(ordered, lo[..., None], axis=-1)[..., 0]
    b = np.take_along_axis(ordered, hi[..., None], axis=-1)[..., 0]

    out_valid = count[:, 0, 0] > 0 if coords.shape[1] else np.zeros(len(valid), dtype=bool)
    median = np.where(count > 0, 0.5 * (a + b), 0.0)
    return KeypointTrack(np.clip(median, 0.0, 1.0), out_valid)


def filter_clip_keypoints(clip: MotionClip, kernel: int = DEFAULT_KERNEL) -> MotionClip:
    """A copy of `clip` with its keypoint channels median filtered."""
    filtered = temporal_median_filter(KeypointTrack.from_clip(clip), kernel)
    return MotionClip(
        fps=clip.fps,
        motion=clip.motion.copy(),
        keypoints=filtered.coords,
        hand_valid=clip.hand_valid.copy(),
        keypoint_valid=filtered.valid,
        style=clip.style,
        root_offset=clip.root_offset.copy(),
        reference=clip.reference,
    )


def rasterize_keypoints(
    keypoints: np.ndarray,
    valid: np.ndarray | bool,
    height: int,
    width: int,
    sigma_px: float = DEFAULT_SIGMA_PX,
) -> np.ndarray:
    """(K, height, width) Gaussian maps.

    Each blob is centred on the pixel nearest to (x W, y H) and equals 1
    there. Invalid joints leave their channel at zero."""
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    k = len(keypoints)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), (k,))
    out = np.zeros((k, height, width))
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    for j in np.nonzero(valid)[0]:
        cx = np.round(keypoints[j, 0] * width)
        cy = np.round(keypoints[j, 1] * height)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        out[j] = np.exp(-d2 / (2.0 * sigma_px * sigma_px))
    return out


def project_joints(joints: np.ndarray, height: int, width: int) -> np.ndarray:
    """Orthographic pixel coordinates of (..., 3) joints; y points up."""
    joints = np.asarray(joints, dtype=np.float64)
    px = joints[..., 0] * width + width / 2.0
    py = height / 2.0 - joints[..., 1] * height
    return np.stack([px, py], axis=-1)


def _draw_segments(points: np.ndarray, bones: Sequence[tuple[int, int]], height: int, width: int) -> np.ndarray:
    """Anti-aliased one-pixel lines; coverage falls off linearly with the
    distance of the pixel centre from the segment."""
    a = points[[p for p, _ in bones]][:, None, None, :]
    b = points[[j for _, j in bones]][:, None, None, :]
    grid = np.stack(
        np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)),
        axis=-1,
    )[None]
    ab = b - a
    length2 = (ab * ab).sum(axis=-1)
    safe = np.where(length2 > 0, length2, 1.0)
    s = np.where(length2 > 0, ((grid - a) * ab).sum(axis=-1) / safe, 0.0)
    s = np.clip(s, 0.0, 1.0)
    nearest = a + s[..., None] * ab
    d = np.linalg.norm(grid - nearest, axis=-1)
    return np.clip(1.0 - d, 0.0, 1.0).max(axis=0)


def rasterize_hands(
    frame: HandPoseFrame,
    skeleton: HandSkeleton,
    height: int,
    width: int,
    valid: Sequence[bool] = (True, True),
) -> np.ndarray:
    """(2, height, width) line renderings of the left and right hand skeletons."""
    out = np.zeros((2, height, width))
    bones = skeleton.bones()
    for i, hand in enumerate((frame.left, frame.right)):
        if not valid[i]:
            continue
        points = project_joints(hand_joints(hand, skeleton), height, width)
        out[i] = _draw_segments(points, bones, height, width)
    return out


class ConfidenceEmbedding:
    """A trainable per-hand embedding scaled by detection confidence."""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.base = ad.parameter(rng.normal(0.0, 0.02, (2, hidden)), "confidence")

    def params(self) -> dict[str, ad.NdArray]:
        return {"confidence": self.base}

    def scores(self, scores: np.ndarray, collector: Collector = Collector.default) -> np.ndarray:
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        if scores.shape[-1] != 2:
            raise DimensionError("confidence_embedding", scores.shape, (2,))
        clamped = np.clip(scores, 0.0, 1.0)
        for row, col in zip(*np.nonzero(clamped != scores)):
            collector.handle(ScoreClampedWarning(HANDS[col], float(scores[row, col])))
        return clamped

    def __call__(self, scores: np.ndarray, collector: Collector = Collector.default) -> ad.NdArray:
        """(B, hidden) sum over hands of score times that hand's embedding."""
        return ad.matmul(ad.constant(self.scores(scores, collector)), self.base)


class HeatmapPredictor:
    """Two-layer map from a flat latent to (C, H, W) heatmaps."""

    def __init__(
        self,
        latent_dim: int,
        shape: tuple[int, int, int],
        hidden: int,
        rng: np.random.Generator,
    ):
        self.shape = tuple(shape)
        out = int(np.prod(self.shape))
        self._params = {
            "fc1.weight": ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (latent_dim, hidden)), "fc1.weight"),
            "fc1.bias": ad.parameter(np.zeros(hidden), "fc1.bias"),
            "fc2.weight": ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, out)), "fc2.weight"),
            "fc2.bias": ad.parameter(np.zeros(out), "fc2.bias"),
        }

    def params(self) -> dict[str, ad.NdArray]:
        return self._params

    def __call__(self, latent: ad.NdArray) -> ad.NdArray:
        p = self._params
        if latent.ndim != 2:
            raise DimensionError("heatmap_predictor", latent.shape)
        h = ad.gelu(ad.add(ad.matmul(latent, p["fc1.weight"]), p["fc1.bias"]))
        y = ad.add(ad.matmul(h, p["fc2.weight"]), p["fc2.bias"])
        return ad.reshape(y, (latent.shape[0],) + self.shape)


def pose_discriminator_loss(
    z_t: np.ndarray,
    eps_hat: ad.NdArray,
    t: int,
    schedule: NoiseSchedule,
    gt_heatmap: np.ndarray,
    predictor: Callable[[ad.NdArray], ad.NdArray],
) -> ad.NdArray:
    """Root mean square of H - predictor(x0_hat), x0_hat the one-step clean
    estimate from the noise prediction."""
    if np.shape(z_t) != eps_hat.shape:
        raise DimensionError("pose_discriminator_loss", np.shape(z_t), eps_hat.shape)
    x0_hat = predict_x0(np.asarray(z_t, dtype=np.float64), eps_hat, t, schedule)
    predicted = predictor(x0_hat)
    if predicted.shape != np.shape(gt_heatmap):
        raise DimensionError("pose_discriminator_loss", predicted.shape, np.shape(gt_heatmap))
    return ad.rms(ad.sub(ad.constant(gt_heatmap), predicted))


def combined_objective(
    denoise_loss: ad.NdArray, pd_loss: ad.NdArray, weight: float = PD_WEIGHT
) -> ad.NdArray:
    return ad.add(denoise_loss, ad.scale(pd_loss, weight))


@dataclass
class PrepOptions:
    kernel: int = DEFAULT_KERNEL
    """Median filter length in frames; odd."""

    height: int = 64
    width: int = 64
    sigma_px: float = DEFAULT_SIGMA_PX
    """Standard deviation of a keypoint blob, pixels."""

    def __post_init__(self):
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise EvenKernelError(self.kernel)


@dataclass
class PreparedClip:
    clip: MotionClip
    """The input clip with its keypoints median filtered."""

    keypoint_maps: np.ndarray
    """(F, K, H, W)"""

    hand_maps: np.ndarray
    """(F, 2, H, W)"""


def prepare_clip(
    clip: MotionClip,
    skeleton: HandSkeleton,
    options: PrepOptions,
    collector: Optional[Collector] = None,
) -> PreparedClip:
    if collector is None:
        collector = Collector.default
    k = clip.keypoint_count
    h, w = options.height, options.width
    filtered = filter_clip_keypoints(clip, options.kernel) if k else clip

    keypoint_maps = np.zeros((clip.frames, k, h, w))
    hand_maps = np.zeros((clip.frames, 2, h, w))
    for f in range(clip.frames):
        if k:
            keypoint_maps[f] = rasterize_keypoints(
                filtered.keypoints[f], filtered.keypoint_valid[f], h, w, options.sigma_px
            )
        hand_maps[f] = rasterize_hands(
            unpack_frame(clip.motion[f], collector), skeleton, h, w, clip.hand_valid[f]
        )
    return PreparedClip(filtered, keypoint_maps, hand_maps)


def save_heatmaps(path: Path | str, maps: np.ndarray, fps: float = 0.0) -> None:
    """Write (..., C, H, W) maps as FEAT with `width` columns; rows run over
    the leading axes, then channels, then image rows."""
    maps = np.asarray(maps)
    save_features(path, maps.reshape(-1, maps.shape[-1]), fps)


def load_heatmaps(path: Path | str, channels: int, height: int) -> np.ndarray:
    """(N, channels, height, width) maps read back from `save_heatmaps`."""
    features = load_features(path).features
    if features.shape[0] % (channels * height):
        raise DimensionError("load_heatmaps", features.shape, (channels, height))
    return features.reshape(-1, channels, height, features.shape[1])


def write_preview(path: Path | str, maps: np.ndarray) -> None:
    """Single-channel PGM of the per-pixel maximum over channels."""
    maps = np.asarray(maps)
    write_pgm(path, maps.reshape(-1, maps.shape[-2], maps.shape[-1]).max(axis=0))
