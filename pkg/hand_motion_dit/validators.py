"""Validation of JSON documents and dataset contents.

JSON documents are checked against the schemas in `schemas/`, loaded into a
`referencing.Registry` so that schemas can reference one another. Dataset
validators follow the same convention as the rest of the package: every
problem goes to a `Collector`, which decides whether to raise.
"""

import json
from functools import cache
from pathlib import Path
from typing import TYPE_CHECKING, Any, Optional

import jsonschema
import numpy as np
import referencing
import referencing.exceptions

from hand_motion_dit.errors import (
    Collector,
    InvalidClipError,
    InvalidConfigError,
    MismatchedDatasetError,
    UnknownStyleError,
)
from hand_motion_dit.formats import AudioFeatureTrack, MotionClip
from hand_motion_dit.kinematics import (
    LEFT_QUATERNIONS,
    NORM_WARNING_TOLERANCE,
    RIGHT_QUATERNIONS,
    canonicalize,
)

if TYPE_CHECKING:
    from hand_motion_dit.reader import Reader

SCHEMA_PATH = Path(__file__).parent / "schemas"
BASE_URI = "https://hand-motion-dit.invalid/schemas/"


def _default_get_registry(
    path: Path = SCHEMA_PATH, base_uri: str = BASE_URI
) -> referencing.Registry:
    registry: referencing.Registry = referencing.Registry()

    for schema_file_path in sorted(path.glob("*.schema.json")):
        with open(schema_file_path, "r") as file:
            schema = json.load(file)
            resource = referencing.Resource.from_contents(schema)  # type: ignore
            registry = registry.with_resource(
                base_uri + schema_file_path.name, resource=resource
            )
    return registry


@cache
def default_registry() -> referencing.Registry:
    return _default_get_registry()


def validate_document(
    document: Any,
    schema_name: str,
    source: str,
    collector: Collector = Collector.default,
    registry: Optional[referencing.Registry] = None,
) -> None:
    """Check `document` against `<schema_name>.schema.json`."""
    if registry is None:
        registry = default_registry()

    try:
        schema = registry.resolver(BASE_URI).lookup(f"{schema_name}.schema.json").contents
    except referencing.exceptions.Unresolvable as exc:
        collector.handle(
            InvalidConfigError(
                source,
                f"the schema for {schema_name} is invalid or missing."
                f" Error: {type(exc).__name__}",
            )
        )
        return

    validator = jsonschema.Draft202012Validator(schema, registry=registry)
    errors = sorted(validator.iter_errors(document), key=lambda e: e.json_path)
    for error in errors:
        collector.handle(InvalidConfigError(source, error.message, error.json_path))


def load_document(
    path: Path | str, schema_name: str, collector: Collector = Collector.default
) -> dict[str, Any]:
    """Read a JSON file and validate it."""
    path = Path(path)
    try:
        with open(path) as file:
            document = json.load(file)
    except FileNotFoundError:
        raise InvalidConfigError(str(path), "file not found")
    except json.JSONDecodeError as e:
        raise InvalidConfigError(str(path), f"not valid JSON: {e.msg} (line {e.lineno})")

    validate_document(document, schema_name, str(path), collector)
    return document


def check_finite(clip: MotionClip, name: str, collector: Collector = Collector.default) -> None:
    if not np.isfinite(clip.frame_vectors()).all():
        collector.handle(InvalidClipError(name, "non-finite frame values"))


def check_quaternions(clip: MotionClip, name: str, collector: Collector = Collector.default) -> None:
    """Every rotation slot holds a canonical unit quaternion."""
    for hand, slots in (("left", LEFT_QUATERNIONS), ("right", RIGHT_QUATERNIONS)):
        q = clip.motion[:, slots].reshape(clip.frames, 16, 4)
        deviation = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
        if deviation.size and deviation.max() > NORM_WARNING_TOLERANCE:
            frame = int(np.unravel_index(deviation.argmax(), deviation.shape)[0])
            collector.handle(
                InvalidClipError(name, f"{hand} quaternion in frame {frame} is not unit norm")
            )
        if not np.array_equal(canonicalize(q), q):
            collector.handle(InvalidClipError(name, f"{hand} quaternions are not canonical"))


def check_keypoints(clip: MotionClip, name: str, collector: Collector = Collector.default) -> None:
    valid = clip.keypoint_valid.astype(bool)
    kp = clip.keypoints[valid]
    if kp.size and (kp.min() < 0.0 or kp.max() > 1.0):
        collector.handle(InvalidClipError(name, "keypoints outside [0, 1]"))


def check_style(
    clip: MotionClip, name: str, collector: Collector = Collector.default, styles: Optional[list[str]] = None
) -> None:
    if styles is not None and not 0 <= clip.style < len(styles):
        collector.handle(UnknownStyleError(clip.style, styles))


def check_recording(
    clip: MotionClip,
    name: str,
    collector: Collector = Collector.default,
    fps: Optional[int] = None,
    keypoint_count: Optional[int] = None,
) -> None:
    """Frame rate and keypoint count agree with the manifest."""
    if fps is not None and clip.fps != fps:
        collector.handle(
            MismatchedDatasetError(f"{name} is recorded at {clip.fps} fps, manifest says {fps}")
        )
    if keypoint_count is not None and clip.keypoint_count != keypoint_count:
        collector.handle(
            MismatchedDatasetError(
                f"{name} has {clip.keypoint_count} keypoints, manifest says {keypoint_count}"
            )
        )


def validate_clip(
    clip: MotionClip,
    name: str,
    collector: Collector = Collector.default,
    styles: Optional[list[str]] = None,
    fps: Optional[int] = None,
    keypoint_count: Optional[int] = None,
) -> None:
    """Content checks a decoded clip must pass before it is used for training."""
    check_finite(clip, name, collector)
    check_quaternions(clip, name, collector)
    check_keypoints(clip, name, collector)
    check_style(clip, name, collector, styles)
    check_recording(clip, name, collector, fps, keypoint_count)


def check_audio_width(
    audio: AudioFeatureTrack, clip_id: str, collector: Collector, audio_dim: int
) -> None:
    if audio.dim != audio_dim:
        collector.handle(
            MismatchedDatasetError(
                f"audio for {clip_id} has {audio.dim} features, manifest says {audio_dim}"
            )
        )


def check_audio(reader: "Reader", clip_id: str, collector: Collector = Collector.default) -> None:
    check_audio_width(reader[clip_id].audio, clip_id, collector, reader.info.audio_dim)


def validate_dataset(reader: "Reader", collector: Collector = Collector.default) -> None:
    """Validate every clip in a dataset and its audio against the manifest."""
    info = reader.info

    def validate(reader: "Reader", clip_id: str) -> None:
        validate_clip(
            reader[clip_id].clip,
            clip_id,
            collector,
            styles=info.styles.names,
            fps=info.fps,
            keypoint_count=info.keypoint_count,
        )
        check_audio(reader, clip_id, collector)

    reader.apply(validate)
