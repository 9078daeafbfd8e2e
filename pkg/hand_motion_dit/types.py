"""Shapes of the JSON documents the program reads and writes.

The schemas in `schemas/` are the source of truth for validation; these
TypedDicts describe the same documents for the type checker.
"""

from typing import NotRequired, Optional, Required, Sequence, TypedDict


class ModelDocument(TypedDict, total=False):
    depth: int
    hidden: int
    heads: int
    capacity: int
    history_len: int
    keypoint_count: int
    audio_dim: int
    style_count: int
    bucket_count: int
    bucket_low: float
    bucket_high: float
    ref_dim: int
    frequency_dim: int


class ScheduleDocument(TypedDict, total=False):
    kind: str
    steps: int
    beta_start: float
    beta_end: float


class OptimizerDocument(TypedDict, total=False):
    lr: float
    beta1: float
    beta2: float
    eps: float


class TrainingDocument(TypedDict, total=False):
    steps: int
    batch_size: int
    checkpoint_every: int
    debug: bool


class RunConfigDocument(TypedDict):
    manifest: Required[str]
    seed: NotRequired[int]
    out: NotRequired[str]
    model: NotRequired[ModelDocument]
    schedule: NotRequired[ScheduleDocument]
    optimizer: NotRequired[OptimizerDocument]
    training: NotRequired[TrainingDocument]


class ClipEntry(TypedDict):
    id: Required[str]
    clip: Required[str]
    audio: Required[str]
    reference: NotRequired[Optional[str]]


class ManifestDocument(TypedDict):
    fps: NotRequired[int]
    capacity: Required[int]
    history_len: Required[int]
    keypoint_count: Required[int]
    audio_dim: Required[int]
    ref_dim: NotRequired[int]
    styles: Required[Sequence[str]]
    clips: Required[Sequence[ClipEntry]]
    chains: NotRequired[Sequence[Sequence[str]]]


class SynthSpecDocument(TypedDict, total=False):
    chains: int
    clips_per_chain: int
    frames: int
    fps: int
    audio_fps: int
    audio_dim: int
    keypoint_count: int
    styles: Sequence[str]
    style_frequencies: Sequence[float]
    amplitude: float
    pulse_width: float
    ref_dim: int
    capacity: int
    history_len: int


class SkeletonDocument(TypedDict):
    parents: Required[Sequence[int]]
    offsets: Required[Sequence[Sequence[float]]]
