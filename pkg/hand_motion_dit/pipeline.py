"""From stored clips to training batches, plus the synthetic dataset.

The synthetic generator produces chains of clips cut from one continuous
performance per chain. Hands move on circular paths whose phase is warped so
that hand speed dips to a minimum exactly once per beat; the audio features
are a fixed mix of a pulse envelope peaking on those beats and the beat
phase itself. Audio therefore determines motion, which is what the overfit
and conditioning experiments rely on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from hand_motion_dit.conditioning import (
    ConditionBundle,
    StyleTable,
    clip_amplitudes,
    derive_hand_masks,
)
from hand_motion_dit.diffusion import DiffusionBatch, History, NoiseSchedule
from hand_motion_dit.errors import Collector, ContractError, InvalidConfigError
from hand_motion_dit.formats import AudioFeatureTrack, MotionClip, save_clip, save_features
from hand_motion_dit.kinematics import (
    JOINT_COUNT,
    LEFT_QUATERNIONS,
    LEFT_TRANSLATION,
    MOTION_VALUES,
    RIGHT_QUATERNIONS,
    RIGHT_TRANSLATION,
    axis_angle_to_quaternion,
)
from hand_motion_dit.reader import (
    DatasetEntry,
    DatasetInfo,
    DictReader,
    Reader,
    manifest_document,
    write_manifest,
)
from hand_motion_dit.types import SynthSpecDocument
from hand_motion_dit.validators import load_document

logger = logging.getLogger(__name__)


def align_audio(
    track: AudioFeatureTrack, motion_fps: float, capacity: int, start_frame: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Resample features to the motion frame rate by linear interpolation.

    Returns (capacity, audio_dim) features for motion frames `start_frame`
    onwards, zero beyond the end of the track, and the matching row-validity
    mask."""
    if track.frames == 0:
        raise ContractError("cannot align an empty audio track")
    fps = track.fps if track.fps > 0 else motion_fps
    # Multiply before dividing so integer ratios land exactly on feature rows.
    positions = np.arange(start_frame, start_frame + capacity) * fps / motion_fps
    valid = positions <= track.frames - 1
    out = np.zeros((capacity, track.dim))
    p = positions[valid]
    lo = np.floor(p).astype(np.int64)
    hi = np.minimum(lo + 1, track.frames - 1)
    w = (p - lo)[:, None]
    exact = w[:, 0] == 0.0
    rows = (1.0 - w) * track.features[lo] + w * track.features[hi]
    rows[exact] = track.features[lo[exact]]
    out[valid] = rows
    return out, valid


def extract_history(
    previous: Optional[MotionClip], history_len: int, dim: int, fill: float = 0.0
) -> History:
    """The last `history_len` frames of `previous`, right-aligned; missing
    frames are invalid and hold `fill`."""
    history = History.empty(history_len, dim, fill)
    if previous is None or history_len == 0:
        return history
    n = min(history_len, previous.frames)
    if n == 0:
        return history
    history.frames[history_len - n :] = previous.frame_vectors()[-n:]
    history.valid[history_len - n :] = True
    history.hand_mask[history_len - n :] = previous.hand_valid[-n:]
    return history


def condition_for(
    entry: DatasetEntry, info: DatasetInfo, amplitude: Optional[np.ndarray] = None
) -> ConditionBundle:
    clip = entry.clip
    audio, audio_mask = align_audio(entry.audio, clip.fps, info.capacity)
    return ConditionBundle(
        audio=audio,
        audio_mask=audio_mask,
        style=clip.style,
        amplitude=clip_amplitudes(clip) if amplitude is None else np.asarray(amplitude),
        root_offset=np.asarray(clip.root_offset, dtype=np.float64),
        hand_mask=derive_hand_masks(clip.hand_valid, clip.frames, info.capacity),
        reference=entry.reference,
    )


def make_batch(
    reader: Reader,
    clip_ids: Sequence[str],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    debug: bool = False,
    seed: Optional[int] = None,
) -> DiffusionBatch:
    """Assemble clips into a padded batch with sampled steps and noise.

    In `debug` mode every padding value is NaN, so any read past a clip's end
    shows up as a non-finite error downstream."""
    info = reader.info
    fill = np.nan if debug else 0.0
    dim = info.dim
    b = len(clip_ids)

    x0 = np.full((b, info.capacity, dim), fill)
    mask = np.zeros((b, info.capacity), dtype=bool)
    histories: list[History] = []
    conditions: list[ConditionBundle] = []
    for i, clip_id in enumerate(clip_ids):
        entry = reader[clip_id]
        clip = entry.clip
        if clip.frames > info.capacity:
            raise ContractError(f"{clip_id} has {clip.frames} frames, capacity is {info.capacity}")
        x0[i, : clip.frames] = clip.frame_vectors()
        mask[i, : clip.frames] = True
        previous = reader.previous(clip_id)
        histories.append(
            extract_history(
                previous.clip if previous else None, info.history_len, dim, fill
            )
        )
        conditions.append(condition_for(entry, info))

    t = rng.integers(0, schedule.T, size=b)
    eps = rng.standard_normal((b, info.capacity, dim))
    return DiffusionBatch(x0, t, eps, mask, histories, conditions, seed)


# Upper-body keypoints, COCO order without the legs.
KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
)

_KEYPOINT_TEMPLATE = np.array(
    [
        [0.50, 0.18],
        [0.47, 0.15],
        [0.53, 0.15],
        [0.44, 0.17],
        [0.56, 0.17],
        [0.38, 0.32],
        [0.62, 0.32],
        [0.33, 0.50],
        [0.67, 0.50],
        [0.30, 0.65],
        [0.70, 0.65],
        [0.42, 0.85],
        [0.58, 0.85],
    ]
)

HAND_CENTERS = np.array([[-0.25, -0.1, 0.0], [0.25, -0.1, 0.0]])
PHASE_WARP = 0.9


@dataclass
class SynthSpec:
    chains: int = 4
    """Independent performances; each is cut into `clips_per_chain` clips."""

    clips_per_chain: int = 2
    frames: int = 64
    """Frames per clip."""

    fps: int = 25
    audio_fps: int = 50
    """Feature rate of the generated audio; aligned to `fps` on load."""

    audio_dim: int = 16
    keypoint_count: int = 13
    styles: list[str] = field(default_factory=lambda: ["speaking", "singing", "gesture-dance"])
    style_frequencies: list[float] = field(default_factory=lambda: [1.0, 0.75, 1.5])
    """Beats per second for each style."""

    amplitude: float = 0.15
    """Radius of the circular hand paths."""

    pulse_width: float = 0.04
    """Standard deviation of an audio beat pulse, seconds."""

    ref_dim: int = 0
    """When > 0 every chain gets a reference vector that shifts its hands."""

    capacity: int = 64
    history_len: int = 8

    def __post_init__(self):
        if len(self.style_frequencies) != len(self.styles):
            raise InvalidConfigError("synth", "one frequency per style is required")
        if self.frames > self.capacity:
            raise InvalidConfigError("synth", "clips must fit in the capacity")
        if self.keypoint_count not in (0, len(KEYPOINT_NAMES)):
            raise InvalidConfigError(
                "synth", f"keypoint_count must be 0 or {len(KEYPOINT_NAMES)}"
            )
        if self.audio_dim < 5:
            raise InvalidConfigError("synth", "audio_dim must be at least 5")

    def info(self) -> DatasetInfo:
        return DatasetInfo(
            capacity=self.capacity,
            history_len=self.history_len,
            keypoint_count=self.keypoint_count,
            audio_dim=self.audio_dim,
            fps=self.fps,
            ref_dim=self.ref_dim,
            styles=StyleTable(list(self.styles)),
        )


def _warped_phase(cycles: np.ndarray) -> np.ndarray:
    """Monotone phase whose derivative 1 - 0.9 cos(2 pi s) is smallest on beats."""
    return cycles - PHASE_WARP * np.sin(2.0 * np.pi * cycles) / (2.0 * np.pi)


def _beat_envelope(times: np.ndarray, frequency: float, offset: float, width: float) -> np.ndarray:
    cycles = times * frequency - offset
    nearest = np.round(cycles)
    dt = (cycles - nearest) / frequency
    return np.exp(-(dt * dt) / (2.0 * width * width))


def _motion(spec: SynthSpec, frequency: float, offset: float, shift: np.ndarray, frames: int) -> np.ndarray:
    times = np.arange(frames) / spec.fps
    u = 2.0 * np.pi * _warped_phase(times * frequency - offset)
    motion = np.zeros((frames, MOTION_VALUES))
    for hand, (quats, trans, side) in enumerate(
        ((LEFT_QUATERNIONS, LEFT_TRANSLATION, 1.0), (RIGHT_QUATERNIONS, RIGHT_TRANSLATION, -1.0))
    ):
        path = np.stack(
            [side * np.cos(u), np.sin(u), 0.2 * np.sin(2.0 * u)], axis=-1
        )
        motion[:, trans] = HAND_CENTERS[hand] + shift + spec.amplitude * path

        aa = np.zeros((frames, JOINT_COUNT, 3))
        aa[:, 0, 2] = side * 0.3 * np.sin(u)
        aa[:, 1:, 0] = (0.25 + 0.15 * np.cos(u))[:, None]
        motion[:, quats] = axis_angle_to_quaternion(aa).reshape(frames, -1)
    return motion


def _keypoints(motion: np.ndarray) -> np.ndarray:
    frames = len(motion)
    kp = np.repeat(_KEYPOINT_TEMPLATE[None], frames, axis=0)
    for wrist, elbow, trans in ((9, 7, LEFT_TRANSLATION), (10, 8, RIGHT_TRANSLATION)):
        xy = motion[:, trans][:, :2]
        kp[:, wrist] = [0.5, 0.6] + xy * [1.0, -1.0]
        kp[:, elbow] = 0.5 * (kp[:, wrist] + kp[:, wrist - 4])
    return np.clip(kp, 0.0, 1.0)


@dataclass
class SyntheticDataset:
    info: DatasetInfo
    entries: list[DatasetEntry]
    chains: list[list[str]]
    references: dict[str, np.ndarray]
    """Reference vectors by reference name, empty when `ref_dim` is 0."""

    def reader(self) -> DictReader:
        return DictReader(self.info, self.entries, self.chains)


def synth_dataset(spec: SynthSpec, seed: int) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    info = spec.info()

    # Orthonormal rows keep the feature energy equal to the envelope energy plus
    # a constant, so energy peaks sit on the beats.
    basis = np.linalg.qr(rng.standard_normal((spec.audio_dim, 5)))[0].T

    entries: list[DatasetEntry] = []
    chains: list[list[str]] = []
    references: dict[str, np.ndarray] = {}
    total = spec.frames * spec.clips_per_chain
    audio_rows = spec.frames * spec.audio_fps // spec.fps

    for c in range(spec.chains):
        style = c % len(spec.styles)
        frequency = spec.style_frequencies[style]
        offset = float(rng.uniform(0.0, 1.0))
        root = np.concatenate(
            [rng.uniform(-0.05, 0.05, 3), axis_angle_to_quaternion(rng.uniform(-0.2, 0.2, 3))]
        )
        shift = np.zeros(3)
        ref_name = None
        reference = None
        if spec.ref_dim:
            reference = rng.standard_normal(spec.ref_dim)
            shift[1] = 0.1 * math.copysign(1.0, reference[0])
            ref_name = f"chain{c:02d}.ref.feat"
            references[ref_name] = reference

        motion = _motion(spec, frequency, offset, shift, total)
        keypoints = _keypoints(motion)[:, : spec.keypoint_count]
        audio_times = np.arange(audio_rows * spec.clips_per_chain) / spec.audio_fps
        phase = 2.0 * np.pi * (audio_times * frequency - offset)
        sources = np.stack(
            [
                _beat_envelope(audio_times, frequency, offset, spec.pulse_width),
                np.cos(phase),
                np.sin(phase),
                np.cos(2.0 * phase),
                np.sin(2.0 * phase),
            ],
            axis=-1,
        )
        features = sources @ basis

        chain: list[str] = []
        for k in range(spec.clips_per_chain):
            clip_id = f"chain{c:02d}_clip{k:02d}"
            rows = slice(k * spec.frames, (k + 1) * spec.frames)
            clip = MotionClip(
                fps=spec.fps,
                motion=motion[rows],
                keypoints=keypoints[rows],
                hand_valid=np.ones((spec.frames, 2), dtype=bool),
                keypoint_valid=np.ones(spec.frames, dtype=bool),
                style=style,
                root_offset=root,
                reference=ref_name,
            )
            audio = AudioFeatureTrack(
                float(spec.audio_fps), features[k * audio_rows : (k + 1) * audio_rows]
            )
            entries.append(DatasetEntry(clip_id, clip, audio, reference))
            chain.append(clip_id)
        chains.append(chain)

    logger.info("synthesised %d clips in %d chains", len(entries), len(chains))
    return SyntheticDataset(info, entries, chains, references)


def load_synth_spec(path: Path | str, collector: Collector = Collector.default) -> SynthSpec:
    document: SynthSpecDocument = load_document(path, "synth_spec", collector)  # type: ignore
    return SynthSpec(**document)  # type: ignore


def write_dataset(dataset: SyntheticDataset, out: Path) -> Path:
    """Write clips, audio, reference vectors and the manifest under `out`;
    returns the manifest path."""
    out = Path(out)
    clips = []
    for entry in dataset.entries:
        save_clip(out / f"{entry.id}.mclip", entry.clip)
        save_features(out / f"{entry.id}.feat", entry.audio.features, entry.audio.fps)
        item = {"id": entry.id, "clip": f"{entry.id}.mclip", "audio": f"{entry.id}.feat"}
        if entry.clip.reference is not None:
            item["reference"] = entry.clip.reference
        clips.append(item)
    for name, vector in dataset.references.items():
        save_features(out / name, vector[None])
    path = out / "manifest.json"
    write_manifest(path, manifest_document(dataset.info, clips, dataset.chains))
    logger.info("wrote %d clips to %s", len(clips), out)
    return path
