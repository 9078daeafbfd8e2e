import json

import numpy as np
import pytest

from hand_motion_dit.diffusion import make_schedule
from hand_motion_dit.errors import ContractError, InvalidConfigError
from hand_motion_dit.formats import AudioFeatureTrack, load_features
from hand_motion_dit.pipeline import (
    SynthSpec,
    align_audio,
    condition_for,
    extract_history,
    load_synth_spec,
    make_batch,
    synth_dataset,
    write_dataset,
)

spec = SynthSpec(
    chains=2, clips_per_chain=2, frames=12, audio_dim=5, keypoint_count=13, capacity=16, history_len=4
)

features = np.arange(20.0).reshape(10, 2)


def test_align_audio_integer_ratio():
    out, valid = align_audio(AudioFeatureTrack(50.0, features), 25, 6)
    assert out.shape == (6, 2)
    np.testing.assert_array_equal(valid, [True] * 5 + [False])
    np.testing.assert_array_equal(out[:5], features[[0, 2, 4, 6, 8]])
    np.testing.assert_array_equal(out[5], [0.0, 0.0])


def test_align_audio_interpolates():
    out, valid = align_audio(AudioFeatureTrack(30.0, features), 25, 3)
    assert valid.all()
    np.testing.assert_allclose(out[1], 0.8 * features[1] + 0.2 * features[2])


def test_align_audio_offset_and_missing_rate():
    out, valid = align_audio(AudioFeatureTrack(0.0, features), 25, 4, start_frame=8)
    np.testing.assert_array_equal(valid, [True, True, False, False])
    np.testing.assert_array_equal(out[:2], features[8:10])


def test_align_audio_of_empty_track():
    with pytest.raises(ContractError):
        align_audio(AudioFeatureTrack(50.0, np.zeros((0, 2))), 25, 4)


def test_extract_history():
    clip = synth_dataset(spec, seed=0).entries[0].clip
    full = extract_history(clip, 4, clip.dim)
    assert full.valid.all()
    np.testing.assert_array_equal(full.frames, clip.frame_vectors()[-4:])

    short = clip
    short.motion = clip.motion[:2]
    short.keypoints = clip.keypoints[:2]
    short.hand_valid = clip.hand_valid[:2]
    partial = extract_history(short, 4, clip.dim, fill=np.nan)
    np.testing.assert_array_equal(partial.valid, [False, False, True, True])
    assert np.isnan(partial.frames[:2]).all()
    assert not partial.hand_mask[:2].any()

    empty = extract_history(None, 4, clip.dim)
    assert not empty.valid.any()
    assert len(empty) == 4


def test_synthetic_dataset_is_seeded():
    a = synth_dataset(spec, seed=5)
    b = synth_dataset(spec, seed=5)
    c = synth_dataset(spec, seed=6)
    for x, y in zip(a.entries, b.entries):
        np.testing.assert_array_equal(x.clip.motion, y.clip.motion)
        np.testing.assert_array_equal(x.audio.features, y.audio.features)
    assert not np.array_equal(a.entries[0].audio.features, c.entries[0].audio.features)


def test_synthetic_dataset_layout():
    d = synth_dataset(spec, seed=0)
    assert [e.id for e in d.entries] == [
        "chain00_clip00",
        "chain00_clip01",
        "chain01_clip00",
        "chain01_clip01",
    ]
    assert d.chains == [["chain00_clip00", "chain00_clip01"], ["chain01_clip00", "chain01_clip01"]]
    entry = d.entries[1]
    assert entry.clip.frames == 12
    assert entry.clip.keypoints.shape == (12, 13, 2)
    assert entry.audio.features.shape == (24, 5)
    assert entry.clip.keypoints.min() >= 0.0 and entry.clip.keypoints.max() <= 1.0
    norms = np.linalg.norm(entry.clip.motion[:, :64].reshape(12, 16, 4), axis=-1)
    np.testing.assert_allclose(norms, 1.0)
    # consecutive clips of a chain are cut from one performance
    prev = d.entries[0].clip.motion[-1, 64:67]
    step = np.linalg.norm(entry.clip.motion[0, 64:67] - prev)
    assert step < 0.1
    assert d.entries[2].clip.style == 1


def test_synthetic_references():
    d = synth_dataset(SynthSpec(**{**spec.__dict__, "ref_dim": 3}), seed=0)
    assert sorted(d.references) == ["chain00.ref.feat", "chain01.ref.feat"]
    assert d.entries[0].reference.shape == (3,)
    assert d.entries[0].clip.reference == "chain00.ref.feat"


def test_synth_spec_validation():
    with pytest.raises(InvalidConfigError):
        SynthSpec(style_frequencies=[1.0])
    with pytest.raises(InvalidConfigError):
        SynthSpec(frames=80, capacity=64)
    with pytest.raises(InvalidConfigError):
        SynthSpec(keypoint_count=5)
    with pytest.raises(InvalidConfigError):
        SynthSpec(audio_dim=4)


def test_condition_for():
    d = synth_dataset(spec, seed=0)
    entry = d.entries[0]
    cond = condition_for(entry, d.info)
    assert cond.audio.shape == (16, 5)
    np.testing.assert_array_equal(cond.audio_mask, np.arange(16) < 12)
    np.testing.assert_array_equal(cond.hand_mask[:, 0], np.arange(16) < 12)
    assert (cond.amplitude > 0).all()
    np.testing.assert_array_equal(cond.root_offset, entry.clip.root_offset)


def test_make_batch():
    reader = synth_dataset(spec, seed=0).reader()
    s = make_schedule(T=20)
    ids = ["chain00_clip00", "chain00_clip01"]
    batch = make_batch(reader, ids, s, np.random.default_rng(0))
    assert len(batch) == 2
    assert batch.x0.shape == (2, 16, 160)
    assert batch.eps.shape == (2, 16, 160)
    assert batch.hand_mask.shape == (2, 16, 2)
    assert ((batch.t >= 0) & (batch.t < 20)).all()
    np.testing.assert_array_equal(batch.mask[0], np.arange(16) < 12)
    assert (batch.x0[~batch.mask] == 0.0).all()
    assert not batch.history[0].valid.any()
    assert batch.history[1].valid.all()
    previous = reader["chain00_clip00"].clip.frame_vectors()
    np.testing.assert_array_equal(batch.history[1].frames, previous[-4:])


def test_make_batch_debug_fills_padding_with_nan():
    reader = synth_dataset(spec, seed=0).reader()
    batch = make_batch(reader, reader.ids(), make_schedule(T=20), np.random.default_rng(0), debug=True)
    assert np.isnan(batch.x0[~batch.mask]).all()
    assert np.isfinite(batch.x0[batch.mask]).all()
    assert np.isnan(batch.history[0].frames).all()


def test_write_dataset(tmp_path):
    d = synth_dataset(SynthSpec(**{**spec.__dict__, "ref_dim": 3}), seed=0)
    manifest = write_dataset(d, tmp_path)
    document = json.loads(manifest.read_text())
    assert document["capacity"] == 16
    assert document["clips"][0] == {
        "id": "chain00_clip00",
        "clip": "chain00_clip00.mclip",
        "audio": "chain00_clip00.feat",
        "reference": "chain00.ref.feat",
    }
    assert load_features(tmp_path / "chain00_clip00.feat").fps == 50.0
    assert load_features(tmp_path / "chain01.ref.feat").features.shape == (1, 3)


def test_load_synth_spec(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"chains": 3, "frames": 20}))
    loaded = load_synth_spec(path)
    assert loaded.chains == 3
    assert loaded.frames == 20
    assert loaded.capacity == 64

    path.write_text(json.dumps({"chains": 0}))
    with pytest.raises(InvalidConfigError):
        load_synth_spec(path)
