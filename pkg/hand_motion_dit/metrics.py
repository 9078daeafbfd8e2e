"""Motion metrics: DIV, BA, PCK, FGD, HKV, and hand-position histograms.

All metrics work on packed motion arrays (F, 134 + 2K) and only look at the
hand translations, except HKV, which projects forward-kinematics joints onto
the image plane. The definitions are frozen here so that numbers are
comparable between runs of this package; they are not calibrated against any
external benchmark.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.signal import argrelextrema

from hand_motion_dit.errors import (
    Collector,
    DimensionError,
    EigensolveError,
    InvalidConfigError,
    MetricAbsentWarning,
    NegativeEigenvalueError,
    UndefinedMetricError,
)
from hand_motion_dit.formats import write_csv, write_pgm
from hand_motion_dit.kinematics import HandSkeleton, hand_translations, motion_joints

logger = logging.getLogger(__name__)

BA_SIGMA = 0.1
PCK_DELTA = 0.1
EIGEN_TOLERANCE = 1e-8
ENERGY_PERCENTILE = 75.0


def trajectories(motion: np.ndarray) -> np.ndarray:
    """(F, 6) left then right hand translations."""
    return hand_translations(np.asarray(motion)).reshape(len(motion), 6)


def div(samples: Sequence[np.ndarray]) -> float:
    """Mean pairwise distance between hand trajectories of samples generated
    for one audio, as a per-value root mean square so it does not grow with
    the clip length."""
    if len(samples) < 2:
        raise UndefinedMetricError("div", "needs at least two samples")
    trajs = [trajectories(s) for s in samples]
    frames = trajs[0].shape[0]
    if any(t.shape != trajs[0].shape for t in trajs):
        raise DimensionError("div", *(t.shape for t in trajs))
    total = 0.0
    pairs = 0
    for i in range(len(trajs)):
        for j in range(i + 1, len(trajs)):
            total += float(np.linalg.norm(trajs[i] - trajs[j])) / math.sqrt(frames * 6)
            pairs += 1
    return total / pairs


def audio_beats(features: np.ndarray, fps: float, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Beat times (seconds): local maxima of the feature energy above its
    75th percentile."""
    features = np.asarray(features)
    if valid is not None:
        features = features[np.asarray(valid, dtype=bool)]
    if len(features) < 3:
        return np.zeros(0)
    energy = (features * features).mean(axis=1)
    peaks = argrelextrema(energy, np.greater)[0]
    threshold = np.percentile(energy, ENERGY_PERCENTILE)
    return peaks[energy[peaks] > threshold] / fps


def hand_speed(motion: np.ndarray) -> np.ndarray:
    """Per-frame speed (units per frame), averaged over both hands."""
    trans = hand_translations(np.asarray(motion))
    if len(trans) < 2:
        return np.zeros(len(trans))
    velocity = np.gradient(trans, axis=0)
    return np.linalg.norm(velocity, axis=-1).mean(axis=-1)


def motion_beats(motion: np.ndarray, fps: float) -> np.ndarray:
    """Beat times (seconds): local minima of hand speed."""
    speed = hand_speed(motion)
    if len(speed) < 3:
        return np.zeros(0)
    return argrelextrema(speed, np.less)[0] / fps


def beat_align_times(
    motion_times: np.ndarray, audio_times: np.ndarray, sigma: float = BA_SIGMA
) -> float:
    """Mean over motion beats of exp(-d^2 / 2 sigma^2), d the distance to the
    nearest audio beat."""
    motion_times = np.asarray(motion_times, dtype=np.float64)
    audio_times = np.asarray(audio_times, dtype=np.float64)
    if len(motion_times) == 0:
        raise UndefinedMetricError("ba", "no motion beats detected")
    if len(audio_times) == 0:
        raise UndefinedMetricError("ba", "no audio beats detected")
    d = np.abs(motion_times[:, None] - audio_times[None, :]).min(axis=1)
    return float(np.exp(-(d * d) / (2.0 * sigma * sigma)).mean())


def beat_align(
    audio_features: np.ndarray,
    motion: np.ndarray,
    fps: float,
    sigma: float = BA_SIGMA,
    audio_valid: Optional[np.ndarray] = None,
) -> float:
    """BA for audio features already aligned to the motion frame rate."""
    return beat_align_times(
        motion_beats(motion, fps), audio_beats(audio_features, fps, audio_valid), sigma
    )


def pck(generated: np.ndarray, ground_truth: np.ndarray, delta: float = PCK_DELTA) -> float:
    """Fraction of (frame, hand) pairs within `delta` of the ground truth."""
    a = hand_translations(np.asarray(generated))
    b = hand_translations(np.asarray(ground_truth))
    if a.shape != b.shape:
        raise DimensionError("pck", a.shape, b.shape)
    return float((np.linalg.norm(a - b, axis=-1) < delta).mean())


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, features: np.ndarray) -> GaussianSummary:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        n, d = features.shape
        if n < d + 1:
            raise UndefinedMetricError("fgd", f"{n} feature vectors for {d} dimensions")
        cov = np.atleast_2d(np.cov(features, rowvar=False))
        return cls(features.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    try:
        values, vectors = scipy.linalg.eigh(matrix)
    except scipy.linalg.LinAlgError as e:
        raise EigensolveError(str(e))
    if values.min() < -EIGEN_TOLERANCE:
        raise NegativeEigenvalueError(float(values.min()))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2)."""
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    try:
        values = scipy.linalg.eigh(0.5 * (middle + middle.T), eigvals_only=True)
    except scipy.linalg.LinAlgError as e:
        raise EigensolveError(str(e))
    if values.min() < -EIGEN_TOLERANCE:
        raise NegativeEigenvalueError(float(values.min()))
    trace_root = float(np.sqrt(np.clip(values, 0.0, None)).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * trace_root
    return max(value, 0.0)


def fgd_features(
    motion: np.ndarray, window: Optional[int] = None, stride: Optional[int] = None
) -> np.ndarray:
    """Hand-statistics features, 24 per window: for each hand the mean and std
    of its translation and of its per-frame velocity.

    Without `window` the whole clip is one window."""
    motion = np.asarray(motion)
    frames = len(motion)
    if window is None or window >= frames:
        starts = [0]
        window = frames
    else:
        stride = stride or max(1, window // 5)
        starts = list(range(0, frames - window + 1, stride))

    trans = hand_translations(motion)
    rows = []
    for s in starts:
        seg = trans[s : s + window]
        vel = np.diff(seg, axis=0) if len(seg) > 1 else np.zeros((1,) + seg.shape[1:])
        parts = []
        for hand in range(2):
            parts += [
                seg[:, hand].mean(axis=0),
                seg[:, hand].std(axis=0),
                vel[:, hand].mean(axis=0),
                vel[:, hand].std(axis=0),
            ]
        rows.append(np.concatenate(parts))
    return np.array(rows)


def fgd(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Fréchet distance between two feature sets (n, d)."""
    return frechet_distance(
        GaussianSummary.from_features(set_a), GaussianSummary.from_features(set_b)
    )


def hand_keypoints_2d(motion: np.ndarray, skeleton: HandSkeleton) -> np.ndarray:
    """(F, 32, 2) orthographic xy projection of both hands' joints."""
    joints = motion_joints(np.asarray(motion), skeleton)
    return joints[..., :2].reshape(len(motion), -1, 2)


def hkv(sequences: Sequence[np.ndarray]) -> float:
    """Mean over coordinates of the variance across time, averaged over the
    sequences. Each sequence is (F, J, 2)."""
    if not sequences:
        raise UndefinedMetricError("hkv", "no sequences")
    return float(np.mean([np.asarray(s).var(axis=0).mean() for s in sequences]))


def hand_distribution(
    samples: Sequence[np.ndarray],
    grid: int = 32,
    bounds: tuple[float, float] = (-1.0, 1.0),
) -> np.ndarray:
    """(2, grid, grid) normalised histograms of left/right xy positions.

    Index [hand, ix, iy]; positions outside `bounds` are clamped onto the
    border cells."""
    if grid < 8:
        raise InvalidConfigError("hand_distribution", f"grid must be at least 8, got {grid}")
    if not samples:
        raise UndefinedMetricError("hand_distribution", "no samples")
    trans = np.concatenate([hand_translations(np.asarray(s)) for s in samples])
    lo, hi = bounds
    xy = np.clip(trans[..., :2], lo, hi)
    out = np.zeros((2, grid, grid))
    for hand in range(2):
        h, _, _ = np.histogram2d(
            xy[:, hand, 0], xy[:, hand, 1], bins=grid, range=[[lo, hi], [lo, hi]]
        )
        out[hand] = h / h.sum()
    return out


def write_distribution(out_dir: Path, histogram: np.ndarray, stem: str = "hands") -> list[Path]:
    """CSV of every cell plus one PGM preview per hand (y up, scaled to the
    maximum cell)."""
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{stem}.csv"
    write_csv(
        csv_path,
        ["hand", "ix", "iy", "value"],
        (
            [name, ix, iy, repr(float(histogram[h, ix, iy]))]
            for h, name in enumerate(("left", "right"))
            for ix in range(histogram.shape[1])
            for iy in range(histogram.shape[2])
        ),
    )
    paths = [csv_path]
    for h, name in enumerate(("left", "right")):
        image = histogram[h].T[::-1]
        peak = image.max()
        path = out_dir / f"{stem}_{name}.pgm"
        write_pgm(path, image / peak if peak > 0 else image)
        paths.append(path)
    return paths


REPORT_KEYS = ("div", "ba", "pck", "fgd", "hkv")


@dataclass
class MetricReport:
    div: Optional[float] = None
    ba: Optional[float] = None
    pck: Optional[float] = None
    fgd: Optional[float] = None
    hkv: Optional[float] = None
    counts: dict[str, int] = field(default_factory=dict)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for key in REPORT_KEYS:
            value = getattr(self, key)
            out.append((key, "absent" if value is None else repr(float(value))))
        out += [(k, str(v)) for k, v in sorted(self.counts.items())]
        return out

    def write_text(self, path: Path) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.items()))

    def write_csv(self, path: Path) -> None:
        write_csv(path, ["metric", "value"], self.items())


def _common_length(motions: Sequence[np.ndarray]) -> list[np.ndarray]:
    n = min(len(m) for m in motions)
    return [np.asarray(m)[:n] for m in motions]


def evaluate(
    generated: Mapping[str, Sequence[np.ndarray]],
    references: Mapping[str, np.ndarray],
    audio: Mapping[str, tuple[np.ndarray, np.ndarray]],
    fps: float,
    skeleton: HandSkeleton,
    sigma: float = BA_SIGMA,
    delta: float = PCK_DELTA,
    window: Optional[int] = None,
    collector: Collector = Collector.default,
) -> MetricReport:
    """Score generated motion grouped by audio stem.

    `audio` maps a stem to features aligned to `fps` and their validity.
    Metrics that cannot be computed are reported absent with a warning."""
    report = MetricReport()
    stems = sorted(generated)
    report.counts = {
        "audios": len(stems),
        "generated": sum(len(generated[s]) for s in stems),
        "references": len(references),
    }

    def attempt(name: str, fn):
        try:
            setattr(report, name, fn())
        except UndefinedMetricError as e:
            collector.handle(MetricAbsentWarning(name, str(e)))

    def diversity() -> float:
        grouped = [generated[s] for s in stems if len(generated[s]) >= 2]
        if grouped:
            return float(np.mean([div(_common_length(g)) for g in grouped]))
        pooled = [m for s in stems for m in generated[s]]
        return div(_common_length(pooled))

    def alignment() -> float:
        scores = []
        for s in stems:
            if s not in audio:
                continue
            features, valid = audio[s]
            for m in generated[s]:
                n = min(len(m), len(features))
                try:
                    scores.append(beat_align(features[:n], m[:n], fps, sigma, valid[:n]))
                except UndefinedMetricError as e:
                    logger.info("%s: %s", s, e)
        if not scores:
            raise UndefinedMetricError("ba", "no sample had beats on both sides")
        return float(np.mean(scores))

    def correctness() -> float:
        scores = []
        for s in stems:
            if s not in references:
                continue
            for m in generated[s]:
                a, b = _common_length([m, references[s]])
                scores.append(pck(a, b, delta))
        if not scores:
            raise UndefinedMetricError("pck", "no generated stem has a reference")
        return float(np.mean(scores))

    def distance() -> float:
        gen = np.concatenate(
            [fgd_features(m, window) for s in stems for m in generated[s]]
        )
        ref = np.concatenate([fgd_features(references[s], window) for s in sorted(references)])
        return fgd(gen, ref)

    def variance() -> float:
        return hkv([hand_keypoints_2d(m, skeleton) for s in stems for m in generated[s]])

    attempt("div", diversity)
    attempt("ba", alignment)
    attempt("pck", correctness)
    if references:
        attempt("fgd", distance)
    else:
        collector.handle(MetricAbsentWarning("fgd", "no reference motion"))
    attempt("hkv", variance)
    return report
