import math

import numpy as np
import pytest

from hand_motion_dit import autodiff as ad
from hand_motion_dit.conditioning import IDENTITY_OFFSET, ConditionBundle
from hand_motion_dit.diffusion import (
    DiffusionBatch,
    History,
    ScheduleConfig,
    assemble_input,
    forward_noise,
    loss_weights,
    make_schedule,
    predict_x0,
    sample,
    schedule_from_config,
    training_loss,
)
from hand_motion_dit.dit import DiTConfig, build_model
from hand_motion_dit.errors import (
    ContractError,
    DegenerateLossError,
    DegenerateScheduleError,
    InvalidScheduleError,
    TimestepRangeError,
)
from hand_motion_dit.pipeline import SynthSpec, make_batch, synth_dataset

TINY = dict(
    chains=2,
    clips_per_chain=2,
    frames=12,
    audio_dim=5,
    keypoint_count=0,
    capacity=16,
    history_len=4,
)


def tiny_reader():
    return synth_dataset(SynthSpec(**TINY), seed=0).reader()


def tiny_model():
    config = DiTConfig(
        depth=1,
        hidden=8,
        heads=2,
        capacity=16,
        history_len=4,
        keypoint_count=0,
        audio_dim=5,
        frequency_dim=8,
    )
    model = build_model(config, seed=0)
    model.randomize(1)
    return model


def condition(capacity=4):
    return ConditionBundle(
        audio=np.zeros((capacity, 1)),
        audio_mask=np.ones(capacity, dtype=bool),
        style=0,
        amplitude=np.zeros(2),
        root_offset=IDENTITY_OFFSET.copy(),
        hand_mask=np.ones((capacity, 2), dtype=bool),
    )


class ZeroDenoiser:
    """Predicts zero noise and remembers every input it was given."""

    history_len = 2
    capacity = 4
    motion_dim = 3

    def __init__(self):
        self.inputs = []

    def denoise(self, x, t, conditions, frame_mask, hand_mask):
        self.inputs.append(x.copy())
        return ad.constant(np.zeros_like(x))


def test_linear_schedule():
    s = make_schedule("linear", 10, 1e-4, 0.02)
    assert s.T == 10
    np.testing.assert_allclose(s.betas, np.linspace(1e-4, 0.02, 10))
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1.0 - s.betas))
    assert s.posterior_variance[0] == 0.0
    t = 5
    expected = s.betas[t] * (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t])
    assert s.posterior_variance[t] == pytest.approx(expected)


def test_schedule_from_config():
    s = schedule_from_config(ScheduleConfig(steps=20, beta_end=0.05))
    assert s.T == 20
    assert s.betas[-1] == pytest.approx(0.05)


def test_invalid_schedules():
    with pytest.raises(InvalidScheduleError):
        make_schedule("cosine")
    with pytest.raises(InvalidScheduleError):
        make_schedule(T=0)
    with pytest.raises(InvalidScheduleError):
        make_schedule(beta_start=0.0)
    with pytest.raises(InvalidScheduleError):
        make_schedule(beta_end=1.0)


def test_decreasing_betas_are_allowed():
    s = make_schedule(T=5, beta_start=0.02, beta_end=0.01)
    np.testing.assert_allclose(s.betas, np.linspace(0.02, 0.01, 5))
    assert (np.diff(s.alpha_bars) < 0).all()
    single = make_schedule(T=1, beta_start=0.5, beta_end=0.1)
    np.testing.assert_array_equal(single.alpha_bars, [0.5])


def test_predict_x0_inverts_forward_noise():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 5))
    for t in range(s.T):
        eps = rng.normal(size=x0.shape)
        z = forward_noise(x0, t, eps, s)
        assert np.abs(predict_x0(z, eps, t, s) - x0).max() < 1e-9


def test_forward_noise_moments():
    s = make_schedule()
    rng = np.random.default_rng(11)
    n = 100_000
    t = 500
    ab = s.alpha_bars[t]
    z = forward_noise(np.full(n, 0.7), t, rng.standard_normal(n), s)
    mean_tol = 3.0 * math.sqrt((1.0 - ab) / n)
    var_tol = 3.0 * (1.0 - ab) * math.sqrt(2.0 / (n - 1))
    assert abs(z.mean() - math.sqrt(ab) * 0.7) < mean_tol
    assert abs(z.var(ddof=1) - (1.0 - ab)) < var_tol


def test_forward_noise_per_sample_steps():
    s = make_schedule(T=10)
    x0 = np.ones((2, 3, 4))
    eps = np.zeros((2, 3, 4))
    z = forward_noise(x0, np.array([0, 9]), eps, s)
    np.testing.assert_allclose(z[0], math.sqrt(s.alpha_bars[0]))
    np.testing.assert_allclose(z[1], math.sqrt(s.alpha_bars[9]))


def test_predict_x0_keeps_gradient_path():
    s = make_schedule(T=10)
    eps_hat = ad.parameter(np.zeros((2, 3)))
    with ad.Tape() as tape:
        loss = ad.sum(predict_x0(np.ones((2, 3)), eps_hat, 4, s))
    g = ad.backward(tape, loss)[eps_hat]
    ab = s.alpha_bars[4]
    np.testing.assert_allclose(g, -math.sqrt(1.0 - ab) / math.sqrt(ab))


def test_degenerate_schedule():
    s = make_schedule(T=100, beta_start=0.5, beta_end=0.9)
    with pytest.raises(DegenerateScheduleError):
        predict_x0(np.zeros(3), np.zeros(3), 99, s)


def test_timestep_out_of_range():
    s = make_schedule(T=10)
    with pytest.raises(TimestepRangeError):
        forward_noise(np.zeros(3), 10, np.zeros(3), s)
    with pytest.raises(TimestepRangeError):
        predict_x0(np.zeros(3), np.zeros(3), -1, s)


def test_loss_weights_gate_each_hand():
    frames = np.array([[True, True, False]])
    hands = np.array([[[False, True], [True, True], [True, True]]])
    w = loss_weights(frames, hands, 140)
    assert w.shape == (1, 3, 140)
    assert w[0, 0, :67].sum() == 0.0
    assert w[0, 0, 67:].sum() == 73.0
    assert w[0, 1].sum() == 140.0
    assert w[0, 2].sum() == 0.0


def test_assemble_input_prepends_history():
    history = History(
        np.full((2, 3), 5.0),
        np.array([False, True]),
        np.array([[True, True], [True, False]]),
    )
    x, frames, hands = assemble_input(
        np.zeros((1, 4, 3)),
        [history],
        np.array([[True, True, True, False]]),
        np.ones((1, 4, 2), dtype=bool),
    )
    assert x.shape == (1, 6, 3)
    np.testing.assert_array_equal(x[0, :2], 5.0)
    np.testing.assert_array_equal(frames[0], [False, True, True, True, True, False])
    # history hand bits never outlive the frame bit
    np.testing.assert_array_equal(hands[0, 0], [False, False])
    np.testing.assert_array_equal(hands[0, 1], [True, False])


def test_loss_of_zero_prediction():
    s = make_schedule(T=10)
    rng = np.random.default_rng(2)
    mask = np.array([[True, True, True, False], [True, True, False, False]])
    batch = DiffusionBatch(
        x0=rng.normal(size=(2, 4, 3)),
        t=np.array([1, 7]),
        eps=rng.normal(size=(2, 4, 3)),
        mask=mask,
        history=[History.empty(2, 3), History.empty(2, 3)],
        conditions=[condition(), condition()],
    )
    loss = training_loss(ZeroDenoiser(), batch, s)
    expected = (batch.eps[mask] ** 2).sum() / (mask.sum() * 3)
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_loss_with_everything_masked():
    s = make_schedule(T=10)
    batch = DiffusionBatch(
        x0=np.zeros((1, 4, 3)),
        t=np.array([1]),
        eps=np.zeros((1, 4, 3)),
        mask=np.zeros((1, 4), dtype=bool),
        history=[History.empty(2, 3)],
        conditions=[condition()],
    )
    with pytest.raises(DegenerateLossError):
        training_loss(ZeroDenoiser(), batch, s)


def test_padding_content_never_changes_the_loss():
    reader = tiny_reader()
    model = tiny_model()
    s = make_schedule(T=50)
    batch = make_batch(reader, reader.ids(), s, np.random.default_rng(4), debug=True)
    assert np.isnan(batch.x0[~batch.mask]).all()
    reference = training_loss(model, batch, s).item()

    garbage = np.random.default_rng(5)
    batch.x0[~batch.mask] = garbage.normal(0.0, 1e6, size=batch.x0[~batch.mask].shape)
    for h in batch.history:
        h.frames[~h.valid] = garbage.normal(0.0, 1e6, size=h.frames[~h.valid].shape)
    assert training_loss(model, batch, s).item() == reference


def test_sampler_keeps_history_clean():
    model = ZeroDenoiser()
    s = make_schedule(T=5)
    history = History(
        np.arange(6.0).reshape(2, 3), np.ones(2, dtype=bool), np.ones((2, 2), dtype=bool)
    )
    out = sample(model, s, 3, condition(), history, np.random.default_rng(0))
    assert out.shape == (3, 3)
    assert len(model.inputs) == 5
    for x in model.inputs:
        np.testing.assert_array_equal(x[0, :2], history.frames)


def test_sampler_final_step_adds_no_noise():
    s = make_schedule(T=1, beta_start=0.01, beta_end=0.01)
    out = sample(ZeroDenoiser(), s, 4, condition(), None, np.random.default_rng(9))
    start = np.random.default_rng(9).standard_normal((1, 4, 3))[0]
    np.testing.assert_allclose(out, start / math.sqrt(0.99))


def test_sampler_length_bounds():
    s = make_schedule(T=2)
    with pytest.raises(ContractError):
        sample(ZeroDenoiser(), s, 0, condition(), None, np.random.default_rng(0))
    with pytest.raises(ContractError):
        sample(ZeroDenoiser(), s, 5, condition(), None, np.random.default_rng(0))


def test_sampling_is_deterministic_per_seed():
    reader = tiny_reader()
    model = tiny_model()
    s = make_schedule(T=5)
    batch = make_batch(reader, reader.ids()[:1], s, np.random.default_rng(0))
    cond = batch.conditions[0]
    a = sample(model, s, 12, cond, batch.history[0], np.random.default_rng(3))
    b = sample(model, s, 12, cond, batch.history[0], np.random.default_rng(3))
    c = sample(model, s, 12, cond, batch.history[0], np.random.default_rng(4))
    assert a.shape == (12, model.motion_dim)
    assert np.isfinite(a).all()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
