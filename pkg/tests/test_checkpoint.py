import struct

import numpy as np
import pytest

from hand_motion_dit import autodiff as ad
from hand_motion_dit.checkpoint import (
    Checkpoint,
    capture,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    restore_params,
    save_checkpoint,
)
from hand_motion_dit.diffusion import ScheduleConfig
from hand_motion_dit.dit import DiTConfig, build_model
from hand_motion_dit.errors import BadMagicError, FileFormatError, TruncatedFileError

config = DiTConfig(
    depth=1, hidden=8, heads=2, capacity=6, history_len=2, keypoint_count=0, audio_dim=5, frequency_dim=8
)


def trained_checkpoint() -> Checkpoint:
    model = build_model(config, seed=1)
    model.randomize(2)
    optimizer = ad.Adam(model.params(), ad.OptimizerConfig(lr=1e-3))
    grads = {n: np.full(p.shape, 0.5) for n, p in model.params().items()}
    optimizer.step(grads)
    rng = np.random.default_rng(4)
    rng.standard_normal(3)
    return capture(
        model, optimizer, 7, rng, ScheduleConfig(steps=50), ["a", "b", "c"], 25, [0.5, 0.25, 1 / 3]
    )


def test_encoding_is_stable():
    data = encode_checkpoint(trained_checkpoint())
    assert data[:4] == b"HMCK"
    assert encode_checkpoint(decode_checkpoint(data)) == data


def test_round_trip_fields(tmp_path):
    original = trained_checkpoint()
    save_checkpoint(tmp_path / "c.hmck", original)
    loaded = load_checkpoint(tmp_path / "c.hmck")
    assert loaded.config == config
    assert loaded.step == 7
    assert loaded.schedule == ScheduleConfig(steps=50)
    assert loaded.optimizer == ad.OptimizerConfig(lr=1e-3)
    assert loaded.styles == ["a", "b", "c"]
    assert loaded.fps == 25
    assert loaded.losses == [0.5, 0.25, 1 / 3]
    assert loaded.adam.step == 1
    for name, value in original.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(loaded.adam.m[name], original.adam.m[name])
        np.testing.assert_array_equal(loaded.adam.v[name], original.adam.v[name])

    rng = np.random.default_rng()
    rng.bit_generator.state = loaded.rng_state
    expected = np.random.default_rng(4)
    expected.standard_normal(3)
    np.testing.assert_array_equal(rng.standard_normal(5), expected.standard_normal(5))


def test_capture_snaps_live_parameters():
    model = build_model(config, seed=1)
    model.randomize(2)
    optimizer = ad.Adam(model.params(), ad.OptimizerConfig())
    checkpoint = capture(model, optimizer, 0, np.random.default_rng(0), ScheduleConfig(), [], 25, [])
    for name, p in model.params().items():
        np.testing.assert_array_equal(p.data, p.data.astype(np.float32))
        np.testing.assert_array_equal(p.data, checkpoint.params[name])


def test_fresh_optimizer_state_has_no_moments():
    model = build_model(config)
    optimizer = ad.Adam(model.params(), ad.OptimizerConfig())
    checkpoint = capture(model, optimizer, 0, np.random.default_rng(0), ScheduleConfig(), [], 25, [])
    data = encode_checkpoint(checkpoint)
    params = sum(p.size for p in model.params().values())
    preamble = struct.unpack_from("<4sII", data)
    assert len(data) == 12 + preamble[2] + 4 * params
    assert decode_checkpoint(data).adam.m == {}


def test_bad_magic():
    data = encode_checkpoint(trained_checkpoint())
    with pytest.raises(BadMagicError) as exc:
        decode_checkpoint(b"XXXX" + data[4:])
    assert exc.value.offset == 0


def test_truncated():
    data = encode_checkpoint(trained_checkpoint())
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:2])
    with pytest.raises(TruncatedFileError) as exc:
        decode_checkpoint(data[:8])
    assert exc.value.section == "header"
    with pytest.raises(TruncatedFileError) as exc:
        decode_checkpoint(data[:40])
    assert exc.value.section == "header"
    with pytest.raises(TruncatedFileError) as exc:
        decode_checkpoint(data[:-1])
    assert exc.value.section.startswith("second moment")


def test_unsupported_version():
    data = encode_checkpoint(trained_checkpoint())
    with pytest.raises(FileFormatError) as exc:
        decode_checkpoint(data[:4] + struct.pack("<I", 9) + data[8:])
    assert exc.value.offset == 4


def test_trailing_bytes():
    data = encode_checkpoint(trained_checkpoint())
    with pytest.raises(FileFormatError) as exc:
        decode_checkpoint(data + b"\0")
    assert exc.value.offset == len(data)


def test_restore_params_checks_names_and_shapes():
    checkpoint = trained_checkpoint()
    model = build_model(config)

    missing = Checkpoint(config, dict(list(checkpoint.params.items())[1:]))
    with pytest.raises(FileFormatError):
        restore_params(model, missing)

    name = next(iter(checkpoint.params))
    reshaped = dict(checkpoint.params)
    reshaped[name] = np.zeros(reshaped[name].shape + (1,))
    with pytest.raises(FileFormatError):
        restore_params(model, Checkpoint(config, reshaped))


def test_model_from_checkpoint():
    checkpoint = trained_checkpoint()
    model = model_from_checkpoint(checkpoint)
    assert model.config == config
    for name, p in model.params().items():
        np.testing.assert_array_equal(p.data, checkpoint.params[name])
        assert p.data is not checkpoint.params[name]
