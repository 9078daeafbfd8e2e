import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hand_motion_dit.checkpoint import load_checkpoint
from hand_motion_dit.errors import InvalidConfigError, MismatchedDatasetError, NonFiniteLossError
from hand_motion_dit.formats import read_csv
from hand_motion_dit.pipeline import SynthSpec, synth_dataset, write_dataset
from hand_motion_dit.reader import FileReader
from hand_motion_dit.training import (
    LOSS_CSV,
    TIMING_CSV,
    RunConfig,
    Trainer,
    load_run_config,
    run_config_from_document,
)

spec = SynthSpec(
    chains=2, clips_per_chain=2, frames=6, audio_dim=5, keypoint_count=0, capacity=8, history_len=2
)

document = {
    "manifest": "data",
    "seed": 3,
    "out": "run",
    "model": {"depth": 1, "hidden": 8, "heads": 2, "frequency_dim": 8},
    "schedule": {"steps": 20},
    "optimizer": {"lr": 1e-3},
    "training": {"steps": 4, "batch_size": 2, "checkpoint_every": 2},
}


def setup_run(tmp_path: Path, **training) -> tuple[RunConfig, FileReader]:
    write_dataset(synth_dataset(spec, seed=0), tmp_path / "data")
    path = tmp_path / "run.json"
    values = dict(document, training={**document["training"], **training})
    path.write_text(json.dumps(values))
    config = load_run_config(path)
    return config, FileReader(config.manifest)


def test_run_config_paths_are_relative_to_the_file(tmp_path):
    config, _ = setup_run(tmp_path)
    assert config.manifest == tmp_path / "data"
    assert config.out == tmp_path / "run"
    assert config.seed == 3
    assert config.schedule.steps == 20
    assert config.optimizer.lr == 1e-3
    assert config.training.checkpoint_every == 2


def test_run_config_defaults():
    config = run_config_from_document({"manifest": "m.json"})  # type: ignore
    assert config.manifest == Path("m.json")
    assert config.out == Path("run")
    assert config.training.steps == 500
    assert config.document()["manifest"] == "m.json"


def test_invalid_run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"manifest": "x", "training": {"steps": -1}}))
    with pytest.raises(InvalidConfigError):
        load_run_config(path)


def test_model_config_comes_from_the_dataset(tmp_path):
    config, reader = setup_run(tmp_path)
    model = config.model_config(reader.info)
    assert model.capacity == 8
    assert model.history_len == 2
    assert model.audio_dim == 5
    assert model.style_count == 3
    assert model.depth == 1

    config.model = {"capacity": 16}  # type: ignore
    with pytest.raises(MismatchedDatasetError):
        config.model_config(reader.info)


def test_training_writes_logs_and_checkpoints(tmp_path):
    config, reader = setup_run(tmp_path)
    trainer = Trainer(config, reader)
    written = trainer.run()
    assert [p.name for p in written] == ["checkpoint-000002.hmck", "checkpoint-000004.hmck"]
    assert trainer.step == 4
    assert len(trainer.losses) == 4
    assert all(np.isfinite(trainer.losses))

    losses = read_csv(config.out / LOSS_CSV)
    assert [row["step"] for row in losses] == ["1", "2", "3", "4"]
    assert [float(row["loss"]) for row in losses] == trainer.losses
    assert len(read_csv(config.out / TIMING_CSV)) == 4

    last = load_checkpoint(written[-1])
    assert last.step == 4
    assert last.losses == trainer.losses
    assert last.styles == ["speaking", "singing", "gesture-dance"]


def test_resumed_run_matches_an_uninterrupted_one(tmp_path):
    config, reader = setup_run(tmp_path)
    straight = Trainer(config, reader)
    straight.run(tmp_path / "a")

    first = Trainer(replace(config, training=replace(config.training, steps=2)), reader)
    first.run(tmp_path / "b")
    second = Trainer(config, reader)
    second.resume(load_checkpoint(tmp_path / "b" / "checkpoint-000002.hmck"))
    second.run(tmp_path / "b")

    assert second.losses == straight.losses
    a = (tmp_path / "a" / "checkpoint-000004.hmck").read_bytes()
    b = (tmp_path / "b" / "checkpoint-000004.hmck").read_bytes()
    assert a == b


def test_losses_depend_only_on_config_and_seed(tmp_path):
    config, reader = setup_run(tmp_path, steps=3)
    first = Trainer(config, reader)
    first.run(tmp_path / "a")
    again = Trainer(config, reader)
    again.run(tmp_path / "b")
    assert first.losses == again.losses

    other = Trainer(replace(config, seed=4), reader)
    other.run(tmp_path / "c")
    assert other.losses != first.losses


def test_debug_padding_does_not_change_losses(tmp_path):
    config, reader = setup_run(tmp_path, steps=2)
    plain = Trainer(config, reader)
    plain.run(tmp_path / "a")
    debug = Trainer(replace(config, training=replace(config.training, debug=True)), reader)
    debug.run(tmp_path / "b")
    assert debug.losses == plain.losses


def test_resume_needs_a_matching_model(tmp_path):
    config, reader = setup_run(tmp_path, steps=2)
    Trainer(config, reader).run(tmp_path / "a")
    checkpoint = load_checkpoint(tmp_path / "a" / "checkpoint-000002.hmck")
    wider = replace(config, model={**config.model, "hidden": 16})
    with pytest.raises(MismatchedDatasetError):
        Trainer(wider, reader).resume(checkpoint)


def test_non_finite_parameters_stop_training(tmp_path):
    config, reader = setup_run(tmp_path)
    trainer = Trainer(config, reader)
    trainer.model.params()["input.weight"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as exc:
        trainer.run(tmp_path / "a")
    assert exc.value.step == 1
    assert trainer.losses == []
    assert read_csv(tmp_path / "a" / LOSS_CSV) == []
