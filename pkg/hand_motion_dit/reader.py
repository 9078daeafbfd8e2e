"""Tools for working with datasets of motion clips.

A dataset is a JSON manifest next to a set of MCLIP motion files and FEAT
audio (and optional reference-context) files. The most important export is
the `Reader` class, which gives keyed access to the decoded clips together
with the chain order that links each clip to the one before it.
"""

import fnmatch
import json
import logging
from abc import ABC
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

import numpy as np

from hand_motion_dit.conditioning import StyleTable, reference_context
from hand_motion_dit.errors import Collector, InvalidBasePathError, InvalidConfigError
from hand_motion_dit.formats import AudioFeatureTrack, MotionClip, load_clip, load_features
from hand_motion_dit.kinematics import HandSkeleton
from hand_motion_dit.types import ManifestDocument
from hand_motion_dit.validators import (
    check_audio_width,
    check_recording,
    check_style,
    load_document,
)

logger = logging.getLogger(__name__)

Pathable = str | Path

DEFAULT_FPS = 25


@dataclass
class ReaderOptions:
    """Options to control the behavior of a Reader."""

    base_path: Optional[Path] = None
    """Directory holding the manifest. Paths inside it are relative to here."""

    manifest: str = "manifest.json"
    """File name of the manifest inside `base_path`."""

    load_references: bool = True
    """Read reference-context vectors named by clips."""

    strict: bool = True
    """Reject clips whose style, frame rate, keypoint count or audio width
    disagree with the manifest, and canonicalise quaternions on load. When
    False the files are kept as stored so validators can report on them."""


@dataclass
class DatasetInfo:
    """Manifest-level facts shared by every clip."""

    capacity: int
    history_len: int
    keypoint_count: int
    audio_dim: int
    fps: int = DEFAULT_FPS
    ref_dim: int = 0
    styles: StyleTable = field(default_factory=StyleTable)

    @property
    def dim(self) -> int:
        return 134 + 2 * self.keypoint_count


@dataclass
class DatasetEntry:
    id: str
    clip: MotionClip
    audio: AudioFeatureTrack
    reference: Optional[np.ndarray] = None


class Reader(ABC):
    """An in-memory copy of a dataset.

    The `Reader` maps clip ids to `DatasetEntry` values in manifest order and
    knows which clip precedes each one in its chain.

    Args:
        options (str | Path):    the dataset directory.
        options (ReaderOptions): an instance of ReaderOptions to change
                                 behaviors of the Reader.
    """

    def __init__(self, options: ReaderOptions | Pathable | None = None) -> None:
        if options is not None:
            if not isinstance(options, ReaderOptions):
                options = ReaderOptions(base_path=Path(options))
            self._options = options
        else:
            self._options = ReaderOptions()

        self._data: dict[str, DatasetEntry] = {}
        self._previous: dict[str, str] = {}
        self._chains: list[list[str]] = []
        self.info = DatasetInfo(capacity=0, history_len=0, keypoint_count=0, audio_dim=0)

    @property
    def base_path(self):
        return self._options.base_path

    def contents(self, clip_id: str) -> DatasetEntry:
        # Can raise KeyError
        return self.__getitem__(clip_id)

    def __getitem__(self, clip_id: str) -> DatasetEntry:
        return self._data[clip_id]

    def find(self, clip_id: str) -> Optional[DatasetEntry]:
        return self._data.get(clip_id)

    def __contains__(self, clip_id: str):
        return clip_id in self._data

    def __len__(self):
        return len(self._data)

    def ids(self) -> list[str]:
        return list(self._data.keys())

    def previous(self, clip_id: str) -> Optional[DatasetEntry]:
        """The clip that precedes `clip_id` in its chain, if any."""
        prev = self._previous.get(clip_id)
        return None if prev is None else self._data[prev]

    def chains(self) -> list[list[str]]:
        return [list(c) for c in self._chains]

    def match(self, pattern: Optional[str] = None) -> Iterable[str]:
        """Clip ids matching a glob pattern, in manifest order."""
        for k in self._data.keys():
            if pattern is None or fnmatch.fnmatchcase(k, pattern):
                yield k

    def apply(self, op: Callable, pattern: Optional[str] = None) -> None:
        """Apply a function to every clip, optionally only to ids matching
        `pattern`."""

        for k in self.match(pattern):
            op(self, k)

    def map(
        self,
        op: Callable,
        pattern: Optional[str] = None,
        accumulator: Any = None,
    ) -> Any:
        """Apply a function to every clip and return the accumulated result."""

        for k in self.match(pattern):
            accumulator = op(self, k, accumulator)

        return accumulator

    def _link_chains(self, chains: list[list[str]]) -> None:
        self._chains = [list(c) for c in chains]
        self._previous = {}
        seen: set[str] = set()
        for chain in self._chains:
            for clip_id in chain:
                if clip_id not in self._data:
                    raise InvalidConfigError(
                        "manifest", f"chain names unknown clip `{clip_id}`", "$.chains"
                    )
                if clip_id in seen:
                    raise InvalidConfigError(
                        "manifest", f"clip `{clip_id}` appears in more than one chain", "$.chains"
                    )
                seen.add(clip_id)
            for prev, cur in zip(chain, chain[1:]):
                self._previous[cur] = prev


class DictReader(Reader):
    """A Reader that works from in-memory entries without reading the
    filesystem. Useful for tests and for freshly generated datasets."""

    def __init__(
        self,
        info: DatasetInfo,
        entries: Iterable[DatasetEntry] = (),
        chains: Optional[list[list[str]]] = None,
        options: ReaderOptions | Pathable | None = None,
    ) -> None:
        super().__init__(options)
        self.set_data(info, entries, chains or [])

    def set_data(
        self, info: DatasetInfo, entries: Iterable[DatasetEntry], chains: list[list[str]]
    ):
        self.info = info
        self._data = {e.id: e for e in entries}
        self._link_chains(chains)


class FileReader(Reader):
    """A Reader that loads a dataset directory described by a manifest."""

    def __init__(
        self,
        options: ReaderOptions | Pathable | None,
        collector: Collector = Collector.default,
    ) -> None:
        if options is None:
            raise InvalidBasePathError("No dataset path specified")

        super().__init__(options)

        path = self._options.base_path

        if path is None:
            raise InvalidBasePathError("Missing dataset base path in constructor arguments.")

        if path.is_file():
            self._options.manifest = path.name
            path = self._options.base_path = path.parent

        if not path.is_dir():
            raise InvalidBasePathError(f'Dataset base path "{path}" is not a directory.')

        document: ManifestDocument = load_document(
            path / self._options.manifest, "manifest", collector
        )  # type: ignore
        self.info = _info_from_manifest(document)
        self._data = _load_entries(path, document, self.info, self._options, collector)
        self._link_chains([list(c) for c in document.get("chains", [])])
        logger.info("read %d clips from %s", len(self._data), path)


def _info_from_manifest(document: ManifestDocument) -> DatasetInfo:
    return DatasetInfo(
        capacity=document["capacity"],
        history_len=document["history_len"],
        keypoint_count=document["keypoint_count"],
        audio_dim=document["audio_dim"],
        fps=document.get("fps", DEFAULT_FPS),
        ref_dim=document.get("ref_dim", 0),
        styles=StyleTable(list(document["styles"])),
    )


def _load_entries(
    base: Path,
    document: ManifestDocument,
    info: DatasetInfo,
    options: ReaderOptions,
    collector: Collector = Collector.default,
) -> dict[str, DatasetEntry]:
    data: dict[str, DatasetEntry] = {}

    for item in document["clips"]:
        clip_id = item["id"]
        if clip_id in data:
            raise InvalidConfigError("manifest", f"duplicate clip id `{clip_id}`", "$.clips")

        clip = load_clip(base / item["clip"], info.capacity, canonical=options.strict)
        audio = load_features(base / item["audio"])
        if options.strict:
            check_style(clip, clip_id, collector, info.styles.names)
            check_recording(clip, clip_id, collector, info.fps, info.keypoint_count)
            check_audio_width(audio, clip_id, collector, info.audio_dim)

        reference = None
        ref_name = item.get("reference")
        if ref_name and options.load_references:
            clip.reference = ref_name
            reference = reference_context(base / ref_name, info.ref_dim)
            if reference is None:
                logger.warning("reference %s for %s not found; unconditioned", ref_name, clip_id)

        data[clip_id] = DatasetEntry(clip_id, clip, audio, reference)

    return data


def manifest_document(
    info: DatasetInfo, clips: list[dict[str, Any]], chains: list[list[str]]
) -> dict[str, Any]:
    return {
        "fps": info.fps,
        "capacity": info.capacity,
        "history_len": info.history_len,
        "keypoint_count": info.keypoint_count,
        "audio_dim": info.audio_dim,
        "ref_dim": info.ref_dim,
        "styles": list(info.styles.names),
        "clips": clips,
        "chains": chains,
    }


def write_manifest(path: Pathable, document: dict[str, Any]) -> None:
    with open(path, "w") as file:
        json.dump(document, file, indent=2, sort_keys=True)
        file.write("\n")


def load_skeleton(path: Pathable, collector: Collector = Collector.default) -> HandSkeleton:
    """Read a skeleton template (`parents` list and 16 `offsets`)."""
    document = load_document(path, "skeleton", collector)
    return HandSkeleton(list(document["parents"]), np.array(document["offsets"], dtype=float))
