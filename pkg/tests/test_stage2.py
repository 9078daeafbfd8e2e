import math
from pathlib import Path

import numpy as np
import pytest

from hand_motion_dit import autodiff as ad
from hand_motion_dit.diffusion import make_schedule
from hand_motion_dit.errors import Collector, DimensionError, EvenKernelError, ScoreClampedWarning
from hand_motion_dit.formats import read_pgm
from hand_motion_dit.kinematics import HandPoseFrame, HandSkeleton
from hand_motion_dit.pipeline import SynthSpec, synth_dataset
from hand_motion_dit.stage2 import (
    ConfidenceEmbedding,
    HeatmapPredictor,
    KeypointTrack,
    PrepOptions,
    combined_objective,
    load_heatmaps,
    pose_discriminator_loss,
    prepare_clip,
    project_joints,
    rasterize_hands,
    rasterize_keypoints,
    save_heatmaps,
    temporal_median_filter,
    write_preview,
)


def brute_force_median(coords, valid, kernel):
    frames = len(coords)
    half = kernel // 2
    out = np.zeros_like(coords)
    out_valid = np.zeros(frames, dtype=bool)
    for f in range(frames):
        idx = np.clip(np.arange(f - half, f + half + 1), 0, frames - 1)
        idx = idx[valid[idx]]
        if len(idx):
            out[f] = np.median(coords[idx], axis=0)
            out_valid[f] = True
    return out, out_valid


def track(frames=80, keypoints=3, seed=0, drop=0.2):
    rng = np.random.default_rng(seed)
    valid = rng.random(frames) > drop
    return KeypointTrack(rng.random((frames, keypoints, 2)), valid)


@pytest.mark.parametrize("kernel", [3, 5, 31])
def test_median_filter_matches_brute_force(kernel):
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        t = track(frames=int(rng.integers(1, 100)), seed=seed, drop=float(rng.uniform(0.0, 0.9)))
        filtered = temporal_median_filter(t, kernel)
        expected, expected_valid = brute_force_median(t.coords, t.valid, kernel)
        np.testing.assert_array_equal(filtered.valid, expected_valid)
        np.testing.assert_array_equal(filtered.coords[expected_valid], expected[expected_valid])


def test_median_filter_removes_a_spike():
    coords = np.full((40, 1, 2), 0.5)
    coords[20] = 1.0
    filtered = temporal_median_filter(KeypointTrack(coords, np.ones(40, dtype=bool)), 5)
    np.testing.assert_array_equal(filtered.coords, 0.5)


def test_median_filter_with_no_valid_neighbours():
    coords = np.full((10, 1, 2), 0.5)
    valid = np.zeros(10, dtype=bool)
    valid[0] = True
    filtered = temporal_median_filter(KeypointTrack(coords, valid), 3)
    np.testing.assert_array_equal(filtered.valid, [True, True] + [False] * 8)
    assert filtered.coords[5, 0, 0] == 0.0


def test_median_filter_kernel_must_be_odd():
    for kernel in (1, 4, 30):
        with pytest.raises(EvenKernelError):
            temporal_median_filter(track(), kernel)
    with pytest.raises(EvenKernelError):
        PrepOptions(kernel=2)


def test_keypoint_blob():
    maps = rasterize_keypoints(np.array([[0.5, 0.5]]), True, 64, 64, sigma_px=2.0)
    assert maps.shape == (1, 64, 64)
    assert np.unravel_index(maps[0].argmax(), (64, 64)) == (32, 32)
    assert maps[0, 32, 32] == 1.0
    assert maps[0].sum() == pytest.approx(2.0 * math.pi * 4.0, rel=1e-3)


def test_keypoint_blob_follows_the_keypoint():
    a = rasterize_keypoints(np.array([[0.5, 0.5]]), True, 64, 64)
    b = rasterize_keypoints(np.array([[0.5 + 10 / 64, 0.5]]), True, 64, 64)
    np.testing.assert_allclose(b[0, :, 10:], a[0, :, :-10], atol=1e-12)


def test_invalid_keypoint_has_empty_map():
    maps = rasterize_keypoints(np.array([[0.5, 0.5], [0.2, 0.2]]), np.array([True, False]), 16, 16)
    assert maps[0].max() == 1.0
    assert maps[1].max() == 0.0


def test_project_joints():
    np.testing.assert_array_equal(
        project_joints(np.array([[0.0, 0.0, 0.0], [0.1, 0.2, 5.0]]), 100, 100),
        [[50.0, 50.0], [60.0, 30.0]],
    )


def test_identity_hand_render():
    skeleton = HandSkeleton()
    maps = rasterize_hands(HandPoseFrame.identity(), skeleton, 100, 100)
    assert maps.shape == (2, 100, 100)
    np.testing.assert_array_equal(maps[0], maps[1])
    # the middle finger runs straight up from the wrist at the image centre
    assert maps[0, 50, 50] == 1.0
    assert maps[0, 40, 50] == pytest.approx(1.0)
    assert maps[0, 36, 50] == pytest.approx(1.0)
    assert maps[0, 60, 50] == 0.0
    assert maps[0, 0, 0] == 0.0
    assert maps.min() >= 0.0 and maps.max() <= 1.0


def test_identity_hand_render_matches_golden_image(tmp_path):
    maps = rasterize_hands(HandPoseFrame.identity(), HandSkeleton(), 100, 100)
    write_preview(tmp_path / "identity.pgm", maps)
    golden = read_pgm(Path(__file__).parent / "data" / "identity_hands.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "identity.pgm"), golden)


def test_hand_render_follows_translation():
    skeleton = HandSkeleton()
    frame = HandPoseFrame.identity()
    a = rasterize_hands(frame, skeleton, 100, 100)
    frame.left.translation = np.array([0.1, 0.0, 0.0])
    frame.right.translation = np.array([0.1, 0.0, 0.0])
    b = rasterize_hands(frame, skeleton, 100, 100)
    np.testing.assert_allclose(b[:, :, 10:], a[:, :, :-10], atol=1e-9)


def test_invalid_hand_is_not_drawn():
    maps = rasterize_hands(HandPoseFrame.identity(), HandSkeleton(), 32, 32, valid=(True, False))
    assert maps[0].max() == 1.0
    assert maps[1].max() == 0.0


def test_confidence_embedding_is_linear():
    emb = ConfidenceEmbedding(6, np.random.default_rng(0))
    a = np.array([[0.2, 0.3]])
    b = np.array([[0.5, 0.1]])
    np.testing.assert_allclose(emb(a).data + emb(b).data, emb(a + b).data, atol=1e-15)
    np.testing.assert_allclose(emb(np.array([1.0, 0.0])).data[0], emb.base.data[0])


def test_confidence_scores_are_clamped():
    emb = ConfidenceEmbedding(4, np.random.default_rng(0))
    collector = Collector(throw=False)
    out = emb(np.array([[1.5, -0.2]]), collector)
    np.testing.assert_allclose(out.data[0], emb.base.data[0])
    warnings = collector.warnings()
    assert len(warnings) == 2
    assert all(isinstance(w, ScoreClampedWarning) for w in warnings)
    with pytest.raises(DimensionError):
        emb(np.zeros((1, 3)))


def pd_setup():
    rng = np.random.default_rng(3)
    schedule = make_schedule(T=10)
    z_t = rng.normal(size=(2, 6))
    eps_hat = ad.parameter(rng.normal(size=(2, 6)))
    gt = rng.random((2, 3, 4, 4))
    predictor = HeatmapPredictor(6, (3, 4, 4), 8, rng)
    return schedule, z_t, eps_hat, gt, predictor


def test_pose_discriminator_loss_of_the_oracle():
    schedule, z_t, eps_hat, gt, _ = pd_setup()
    loss = pose_discriminator_loss(z_t, eps_hat, 4, schedule, gt, lambda x0: ad.constant(gt))
    assert loss.item() == 0.0


def test_pose_discriminator_loss_of_a_zero_predictor():
    schedule, z_t, eps_hat, gt, predictor = pd_setup()
    for p in predictor.params().values():
        p.data = np.zeros(p.shape)
    loss = pose_discriminator_loss(z_t, eps_hat, 4, schedule, gt, predictor)
    assert loss.item() == pytest.approx(math.sqrt((gt * gt).mean()))


def test_pose_discriminator_gradient_reaches_the_noise_prediction():
    schedule, z_t, eps_hat, gt, predictor = pd_setup()
    denoise = ad.parameter(np.array(0.25))
    with ad.Tape() as tape:
        pd = pose_discriminator_loss(z_t, eps_hat, 4, schedule, gt, predictor)
        total = combined_objective(denoise, pd)
    assert total.item() == pytest.approx(0.25 + 0.1 * pd.item())
    grads = ad.backward(tape, total)
    assert np.abs(grads[eps_hat]).sum() > 0.0
    assert np.abs(grads[predictor.params()["fc2.weight"]]).sum() > 0.0


def test_pose_discriminator_shape_checks():
    schedule, z_t, eps_hat, gt, predictor = pd_setup()
    with pytest.raises(DimensionError):
        pose_discriminator_loss(z_t[:, :5], eps_hat, 4, schedule, gt, predictor)
    with pytest.raises(DimensionError):
        pose_discriminator_loss(z_t, eps_hat, 4, schedule, gt[:, :2], predictor)


def test_prepare_clip(tmp_path):
    spec = SynthSpec(chains=1, clips_per_chain=1, frames=10, capacity=16)
    clip = synth_dataset(spec, seed=0).entries[0].clip
    prepared = prepare_clip(clip, HandSkeleton(), PrepOptions(kernel=3, height=16, width=12))
    assert prepared.keypoint_maps.shape == (10, 13, 16, 12)
    assert prepared.hand_maps.shape == (10, 2, 16, 12)
    assert prepared.clip.keypoint_valid.all()
    assert prepared.keypoint_maps.max() == 1.0

    save_heatmaps(tmp_path / "k.feat", prepared.keypoint_maps, fps=25.0)
    loaded = load_heatmaps(tmp_path / "k.feat", 13, 16)
    assert loaded.shape == (10, 13, 16, 12)
    np.testing.assert_allclose(loaded, prepared.keypoint_maps, atol=1e-6)
    with pytest.raises(DimensionError):
        load_heatmaps(tmp_path / "k.feat", 7, 16)

    write_preview(tmp_path / "k.pgm", prepared.keypoint_maps[0])
    assert read_pgm(tmp_path / "k.pgm").shape == (16, 12)
