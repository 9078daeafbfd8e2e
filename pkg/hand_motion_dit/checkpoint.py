"""Checkpoint files.

Layout, little-endian:

    "HMCK" u32 version u32 header_length, header_length bytes of UTF-8 JSON,
    then every parameter as f32 in header order, then (when the header says
    so) the Adam first and second moments as f64 in the same order.

Parameters are stored in single precision. `capture` rounds the live
parameters to f32 before writing them, so the model that keeps training and a
model resumed from the file hold bitwise-identical values, and
save(load(save(x))) reproduces the same bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from hand_motion_dit import autodiff as ad
from hand_motion_dit.diffusion import ScheduleConfig
from hand_motion_dit.dit import DiTConfig, DiTModel, build_model
from hand_motion_dit.errors import BadMagicError, FileFormatError, TruncatedFileError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HMCK"
CHECKPOINT_VERSION = 1
PREAMBLE = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    config: DiTConfig
    params: dict[str, np.ndarray]
    step: int = 0
    adam: ad.AdamState = field(default_factory=ad.AdamState)
    rng_state: Optional[dict[str, Any]] = None
    """`bit_generator.state` of the training generator."""

    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: ad.OptimizerConfig = field(default_factory=ad.OptimizerConfig)
    styles: list[str] = field(default_factory=list)
    fps: int = 25
    losses: list[float] = field(default_factory=list)
    """Loss of every completed step, in order."""


def snap_to_f32(params: Mapping[str, ad.NdArray]) -> None:
    """Round parameters in place to the values a checkpoint can hold."""
    for p in params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)


def capture(
    model: DiTModel,
    optimizer: ad.Adam,
    step: int,
    rng: np.random.Generator,
    schedule: ScheduleConfig,
    styles: list[str],
    fps: int,
    losses: list[float],
) -> Checkpoint:
    snap_to_f32(model.params())
    return Checkpoint(
        config=model.config,
        params={name: p.data.copy() for name, p in model.params().items()},
        step=step,
        adam=ad.AdamState(
            optimizer.state.step,
            {k: v.copy() for k, v in optimizer.state.m.items()},
            {k: v.copy() for k, v in optimizer.state.v.items()},
        ),
        rng_state=rng.bit_generator.state,
        schedule=schedule,
        optimizer=optimizer.config,
        styles=list(styles),
        fps=fps,
        losses=list(losses),
    )


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    names = list(checkpoint.params)
    moments = checkpoint.adam.step > 0
    header = {
        "config": asdict(checkpoint.config),
        "step": checkpoint.step,
        "adam_step": checkpoint.adam.step,
        "moments": moments,
        "rng": checkpoint.rng_state,
        "schedule": asdict(checkpoint.schedule),
        "optimizer": asdict(checkpoint.optimizer),
        "styles": checkpoint.styles,
        "fps": checkpoint.fps,
        "losses": [float(x) for x in checkpoint.losses],
        "params": [[n, list(checkpoint.params[n].shape)] for n in names],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)), text]
    chunks += [checkpoint.params[n].astype("<f4").tobytes() for n in names]
    if moments:
        chunks += [checkpoint.adam.m[n].astype("<f8").tobytes() for n in names]
        chunks += [checkpoint.adam.v[n].astype("<f8").tobytes() for n in names]
    return b"".join(chunks)


def _read_arrays(
    data: bytes,
    offset: int,
    layout: list[tuple[str, tuple[int, ...]]],
    dtype: str,
    section: str,
    name: str,
) -> tuple[dict[str, np.ndarray], int]:
    out = {}
    width = np.dtype(dtype).itemsize
    for param, shape in layout:
        count = int(np.prod(shape))
        if len(data) < offset + count * width:
            raise TruncatedFileError(name, f"{section} {param}", offset)
        out[param] = (
            np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += count * width
    return out, offset


def decode_checkpoint(data: bytes, name: str = "<memory>") -> Checkpoint:
    if len(data) < 4:
        raise TruncatedFileError(name, "magic", len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(name, CHECKPOINT_MAGIC, data[:4])
    if len(data) < PREAMBLE.size:
        raise TruncatedFileError(name, "header", len(data))
    _, version, length = PREAMBLE.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(name, f"unsupported version {version}", offset=4)
    if len(data) < PREAMBLE.size + length:
        raise TruncatedFileError(name, "header", len(data))
    try:
        header = json.loads(data[PREAMBLE.size : PREAMBLE.size + length].decode("utf-8"))
        layout = [(n, tuple(shape)) for n, shape in header["params"]]
        config = DiTConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FileFormatError(name, f"unreadable header: {e}", offset=PREAMBLE.size)

    offset = PREAMBLE.size + length
    params, offset = _read_arrays(data, offset, layout, "<f4", "parameter", name)
    adam = ad.AdamState(step=header["adam_step"])
    if header["moments"]:
        adam.m, offset = _read_arrays(data, offset, layout, "<f8", "first moment", name)
        adam.v, offset = _read_arrays(data, offset, layout, "<f8", "second moment", name)
    if offset != len(data):
        raise FileFormatError(name, f"{len(data) - offset} trailing bytes", offset=offset)

    return Checkpoint(
        config=config,
        params=params,
        step=header["step"],
        adam=adam,
        rng_state=header["rng"],
        schedule=ScheduleConfig(**header["schedule"]),
        optimizer=ad.OptimizerConfig(**header["optimizer"]),
        styles=list(header["styles"]),
        fps=header["fps"],
        losses=[float(x) for x in header["losses"]],
    )


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(checkpoint))
    logger.info("saved checkpoint at step %d to %s", checkpoint.step, path)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def restore_params(model: DiTModel, checkpoint: Checkpoint) -> None:
    """Copy checkpoint parameters into `model`; names and shapes must agree."""
    live = model.params()
    if list(live) != list(checkpoint.params):
        raise FileFormatError("checkpoint", "parameter names do not match the model")
    for n, p in live.items():
        if p.shape != checkpoint.params[n].shape:
            raise FileFormatError(
                "checkpoint", f"{n} has shape {checkpoint.params[n].shape}, model has {p.shape}"
            )
        p.data = checkpoint.params[n].copy()


def model_from_checkpoint(checkpoint: Checkpoint) -> DiTModel:
    model = build_model(checkpoint.config)
    restore_params(model, checkpoint)
    return model
