"""Run configuration and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from hand_motion_dit import autodiff as ad
from hand_motion_dit.checkpoint import Checkpoint, capture, restore_params, save_checkpoint
from hand_motion_dit.diffusion import ScheduleConfig, schedule_from_config, training_loss
from hand_motion_dit.dit import DiTConfig, build_model
from hand_motion_dit.errors import (
    Collector,
    MismatchedDatasetError,
    NonFiniteError,
    NonFiniteLossError,
)
from hand_motion_dit.formats import write_csv
from hand_motion_dit.pipeline import make_batch
from hand_motion_dit.reader import DatasetInfo, Reader
from hand_motion_dit.types import ModelDocument, RunConfigDocument
from hand_motion_dit.validators import load_document

logger = logging.getLogger(__name__)

LOSS_CSV = "loss.csv"
TIMING_CSV = "timing.csv"


@dataclass
class TrainingConfig:
    steps: int = 500
    """Optimizer steps to run in total, counting steps restored from a checkpoint."""

    batch_size: int = 4
    checkpoint_every: int = 100
    """Write a checkpoint after every this many steps, and after the last one."""

    debug: bool = False
    """Fill padding with NaN so any read past a clip end fails loudly."""


@dataclass
class RunConfig:
    manifest: Path
    """Dataset manifest (or its directory)."""

    seed: int = 0
    out: Path = Path("run")
    """Directory receiving logs and checkpoints."""

    model: ModelDocument = field(default_factory=dict)  # type: ignore
    """Denoiser settings; dataset-dependent sizes default to the manifest's."""

    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: ad.OptimizerConfig = field(default_factory=ad.OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def model_config(self, info: DatasetInfo) -> DiTConfig:
        values: dict[str, Any] = dict(self.model)
        expected = {
            "capacity": info.capacity,
            "history_len": info.history_len,
            "keypoint_count": info.keypoint_count,
            "audio_dim": info.audio_dim,
            "ref_dim": info.ref_dim,
            "style_count": len(info.styles),
        }
        for key, value in expected.items():
            if key in values and values[key] != value:
                raise MismatchedDatasetError(
                    f"model {key} is {values[key]} but the dataset has {value}"
                )
            values[key] = value
        return DiTConfig(**values)

    def document(self) -> dict[str, Any]:
        return {
            "manifest": str(self.manifest),
            "seed": self.seed,
            "out": str(self.out),
            "model": dict(self.model),
            "schedule": asdict(self.schedule),
            "optimizer": asdict(self.optimizer),
            "training": asdict(self.training),
        }


def _section(cls, document: Optional[dict[str, Any]]):
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in (document or {}).items() if k in known})


def run_config_from_document(document: RunConfigDocument, base: Path = Path(".")) -> RunConfig:
    """Paths in the document are relative to `base`."""
    return RunConfig(
        manifest=base / document["manifest"],
        seed=document.get("seed", 0),
        out=base / document.get("out", "run"),
        model=dict(document.get("model", {})),  # type: ignore
        schedule=_section(ScheduleConfig, document.get("schedule")),  # type: ignore
        optimizer=_section(ad.OptimizerConfig, document.get("optimizer")),  # type: ignore
        training=_section(TrainingConfig, document.get("training")),  # type: ignore
    )


def load_run_config(path: Path | str, collector: Collector = Collector.default) -> RunConfig:
    path = Path(path)
    document: RunConfigDocument = load_document(path, "run_config", collector)  # type: ignore
    return run_config_from_document(document, path.parent)


class Trainer:
    """Owns the model, optimizer and generator of one training run.

    Every random draw comes from a single generator seeded from the run
    config, so the loss sequence depends only on (config, seed)."""

    def __init__(self, config: RunConfig, reader: Reader):
        if len(reader) == 0:
            raise MismatchedDatasetError("the dataset has no clips")
        self.config = config
        self.reader = reader
        self.ids = reader.ids()
        self.model = build_model(config.model_config(reader.info), config.seed)
        self.schedule = schedule_from_config(config.schedule)
        self.optimizer = ad.Adam(self.model.params(), config.optimizer)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.losses: list[float] = []
        self.times: list[float] = []
        self._started = time.perf_counter()

    def resume(self, checkpoint: Checkpoint) -> None:
        if checkpoint.config != self.model.config:
            raise MismatchedDatasetError("checkpoint model does not match the run config")
        restore_params(self.model, checkpoint)
        self.optimizer.state = ad.AdamState(
            checkpoint.adam.step,
            {k: v.copy() for k, v in checkpoint.adam.m.items()},
            {k: v.copy() for k, v in checkpoint.adam.v.items()},
        )
        if checkpoint.rng_state is not None:
            self.rng.bit_generator.state = checkpoint.rng_state
        self.step = checkpoint.step
        self.losses = list(checkpoint.losses)
        self.times = [float("nan")] * len(self.losses)
        logger.info("resumed at step %d", self.step)

    def _batch_ids(self) -> list[str]:
        size = self.config.training.batch_size
        picks = self.rng.choice(len(self.ids), size=size, replace=size > len(self.ids))
        return [self.ids[i] for i in picks]

    def train_step(self) -> float:
        step = self.step + 1
        batch = make_batch(
            self.reader,
            self._batch_ids(),
            self.schedule,
            self.rng,
            debug=self.config.training.debug,
        )
        try:
            with ad.Tape() as tape:
                loss = training_loss(self.model, batch, self.schedule)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(step)
            grads = ad.backward(tape, loss).for_params(self.model.params())
            self.optimizer.step(grads)
        except NonFiniteError as e:
            raise NonFiniteLossError(step) from e

        self.step = step
        self.losses.append(value)
        self.times.append(time.perf_counter() - self._started)
        return value

    def checkpoint(self) -> Checkpoint:
        info = self.reader.info
        return capture(
            self.model,
            self.optimizer,
            self.step,
            self.rng,
            self.config.schedule,
            list(info.styles.names),
            info.fps,
            self.losses,
        )

    def write_logs(self, out: Path) -> None:
        write_csv(
            out / LOSS_CSV,
            ["step", "loss"],
            ([i + 1, repr(v)] for i, v in enumerate(self.losses)),
        )
        write_csv(
            out / TIMING_CSV,
            ["step", "wall_time"],
            ([i + 1, f"{v:.6f}"] for i, v in enumerate(self.times)),
        )

    def run(self, out: Optional[Path] = None) -> list[Path]:
        """Train up to `training.steps`, checkpointing on the way; returns the
        checkpoint paths written."""
        out = Path(out or self.config.out)
        out.mkdir(parents=True, exist_ok=True)
        every = self.config.training.checkpoint_every
        total = self.config.training.steps
        written: list[Path] = []
        try:
            while self.step < total:
                loss = self.train_step()
                if self.step % 50 == 0:
                    logger.info("step %d loss %.6f", self.step, loss)
                if self.step % every == 0 or self.step == total:
                    path = out / f"checkpoint-{self.step:06d}.hmck"
                    save_checkpoint(path, self.checkpoint())
                    written.append(path)
                    self.write_logs(out)
        finally:
            self.write_logs(out)
        return written
