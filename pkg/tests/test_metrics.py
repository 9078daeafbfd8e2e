import math

import numpy as np
import pytest

from hand_motion_dit.errors import (
    Collector,
    InvalidConfigError,
    MetricAbsentWarning,
    UndefinedMetricError,
)
from hand_motion_dit.formats import read_csv, read_pgm
from hand_motion_dit.kinematics import HandSkeleton
from hand_motion_dit.metrics import (
    GaussianSummary,
    audio_beats,
    beat_align,
    beat_align_times,
    div,
    evaluate,
    fgd,
    fgd_features,
    frechet_distance,
    hand_distribution,
    hand_keypoints_2d,
    hkv,
    motion_beats,
    pck,
    write_distribution,
)

FPS = 25


def beat_motion(frames=100, offset=0.0):
    """Hands sliding along x with speed 1 - cos(2 pi t): zero once per second."""
    t = np.arange(frames) / FPS
    x = t - np.sin(2.0 * np.pi * t) / (2.0 * np.pi)
    motion = np.zeros((frames, 134))
    motion[:, 0:64:4] = 1.0
    motion[:, 67:131:4] = 1.0
    motion[:, 64] = x
    motion[:, 131] = -x
    motion[:, 64:67] += offset
    motion[:, 131:134] += offset
    return motion


def beat_audio(frames=100):
    features = np.zeros((frames, 2))
    features[25::25, 0] = 1.0
    return features


def test_div():
    m = beat_motion()
    assert div([m, m.copy()]) == 0.0
    assert div([m, beat_motion(offset=0.3)]) == pytest.approx(0.3)
    assert div([m, m, beat_motion(offset=0.3)]) == pytest.approx(0.2)
    with pytest.raises(UndefinedMetricError):
        div([m])


def test_beats_of_constructed_signals():
    np.testing.assert_array_equal(motion_beats(beat_motion(), FPS), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(audio_beats(beat_audio(), FPS), [1.0, 2.0, 3.0])


def test_audio_beats_skip_invalid_rows():
    valid = np.arange(100) < 60
    np.testing.assert_array_equal(audio_beats(beat_audio(), FPS, valid), [1.0, 2.0])


def test_beat_align():
    assert beat_align(beat_audio(), beat_motion(), FPS) == 1.0
    assert beat_align_times([1.0, 2.0], [1.1, 2.1], sigma=0.1) == pytest.approx(math.exp(-0.5))
    assert beat_align_times([1.0], [0.0, 0.9, 5.0], sigma=0.1) == pytest.approx(math.exp(-0.5))


def test_beat_align_without_beats():
    with pytest.raises(UndefinedMetricError):
        beat_align_times([], [1.0])
    with pytest.raises(UndefinedMetricError):
        beat_align_times([1.0], [])
    static = np.zeros((50, 134))
    with pytest.raises(UndefinedMetricError):
        beat_align(beat_audio(50), static, FPS)


def test_pck():
    m = beat_motion()
    assert pck(m, m) == 1.0
    assert pck(m, beat_motion(offset=0.1)) == 0.0
    shifted = m.copy()
    shifted[:50, 64] += 1.0
    assert pck(shifted, m) == 0.75


def test_fgd_of_identical_sets():
    features = np.random.default_rng(0).normal(size=(50, 4))
    assert fgd(features, features) < 1e-8


def test_fgd_one_dimension():
    assert fgd(np.array([[-1.0], [1.0]]), np.array([[0.0], [2.0]])) == pytest.approx(1.0)


def test_fgd_matches_closed_form():
    a = GaussianSummary(np.zeros(2), np.diag([4.0, 1.0]))
    b = GaussianSummary(np.array([1.0, 2.0]), np.diag([1.0, 9.0]))
    # 5 + (4 + 1 + 1 + 9) - 2 (2 + 3)
    assert frechet_distance(a, b) == pytest.approx(10.0)


def test_fgd_needs_enough_samples():
    with pytest.raises(UndefinedMetricError):
        fgd(np.zeros((3, 4)), np.zeros((10, 4)))


def test_fgd_features():
    m = beat_motion()
    assert fgd_features(m).shape == (1, 24)
    assert fgd_features(m, window=20).shape == (21, 24)
    assert fgd_features(m, window=20, stride=40).shape == (3, 24)


def test_hkv():
    skeleton = HandSkeleton()
    static = beat_motion()
    static[:, 64:67] = 0.0
    static[:, 131:134] = 0.0
    assert hkv([hand_keypoints_2d(static, skeleton)]) == 0.0
    assert hkv([hand_keypoints_2d(beat_motion(), skeleton)]) > 0.0
    with pytest.raises(UndefinedMetricError):
        hkv([])


def test_hand_keypoints_2d_shape():
    assert hand_keypoints_2d(beat_motion(10), HandSkeleton()).shape == (10, 32, 2)


def test_hand_distribution():
    m = np.zeros((4, 134))
    m[:, 64:66] = [[0.1, 0.1], [0.1, 0.1], [-0.9, 0.9], [5.0, -5.0]]
    hist = hand_distribution([m], grid=8)
    assert hist.shape == (2, 8, 8)
    np.testing.assert_allclose(hist.sum(axis=(1, 2)), [1.0, 1.0])
    assert hist[0, 4, 4] == 0.5
    assert hist[0, 0, 7] == 0.25
    assert hist[0, 7, 0] == 0.25
    assert hist[1, 4, 4] == 1.0
    with pytest.raises(InvalidConfigError):
        hand_distribution([m], grid=4)


def test_write_distribution(tmp_path):
    m = np.zeros((4, 134))
    m[:, 64] = 0.5
    hist = hand_distribution([m], grid=8)
    paths = write_distribution(tmp_path, hist)
    assert [p.name for p in paths] == ["hands.csv", "hands_left.pgm", "hands_right.pgm"]
    rows = read_csv(tmp_path / "hands.csv")
    assert len(rows) == 2 * 8 * 8
    image = read_pgm(tmp_path / "hands_left.pgm")
    assert image.shape == (8, 8)
    assert image.max() == 1.0
    # x = 0.5 lands in column 6, y = 0 in row 3 counted from the top
    assert image[3, 6] == 1.0


def test_evaluate(tmp_path):
    m = beat_motion()
    generated = {"a": [m, beat_motion(offset=0.1)]}
    audio = {"a": (beat_audio(), np.ones(100, dtype=bool))}
    collector = Collector(throw=False)
    report = evaluate(generated, {"a": m}, audio, FPS, HandSkeleton(), window=10, collector=collector)
    assert report.div == pytest.approx(0.1)
    assert report.ba == 1.0
    assert report.pck == 0.5
    assert report.fgd is not None and report.fgd >= 0.0
    assert report.hkv > 0.0
    assert len(collector) == 0

    report.write_text(tmp_path / "report.txt")
    lines = (tmp_path / "report.txt").read_text().splitlines()
    assert [line.split("=")[0] for line in lines] == [
        "div",
        "ba",
        "pck",
        "fgd",
        "hkv",
        "audios",
        "generated",
        "references",
    ]
    assert "generated=2" in lines


def test_evaluate_reports_missing_metrics_as_absent():
    generated = {"a": [beat_motion()]}
    collector = Collector(throw=False)
    report = evaluate(generated, {}, {}, FPS, HandSkeleton(), collector=collector)
    assert report.div is None
    assert report.ba is None
    assert report.pck is None
    assert report.fgd is None
    assert report.hkv is not None
    assert {w.metric for w in collector.warnings()} == {"div", "ba", "pck", "fgd"}
    assert all(isinstance(w, MetricAbsentWarning) for w in collector.warnings())
    assert dict(report.items())["fgd"] == "absent"
