"""DDPM noise schedule, forward noising, the masked denoising objective and
the ancestral sampler.

The model predicts the noise (epsilon parameterisation). History frames from
the previous clip are concatenated in front of the current region as clean
frames: during training they carry no loss, and during sampling they are
written back at every step so only the current region is denoised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Protocol, Sequence

import numpy as np

from hand_motion_dit import autodiff as ad
from hand_motion_dit.errors import (
    ContractError,
    DegenerateLossError,
    DegenerateScheduleError,
    DimensionError,
    InvalidScheduleError,
    TimestepRangeError,
)
from hand_motion_dit.kinematics import HAND_VALUES, MOTION_VALUES

if TYPE_CHECKING:
    from hand_motion_dit.conditioning import ConditionBundle

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear",)
MIN_ALPHA_BAR = 1e-12


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    """Shape of the beta schedule. Only `linear` is implemented."""

    steps: int = 1000
    """Number of diffusion steps T."""

    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray
    """beta~_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t = 0."""

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_timesteps(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.T):
            raise TimestepRangeError(t.tolist(), self.T)
        return t


def make_schedule(
    kind: str = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise InvalidScheduleError(f"unknown kind `{kind}`")
    if T < 1:
        raise InvalidScheduleError(f"T must be at least 1, got {T}")
    # Any betas in (0, 1) keep alpha_bar strictly decreasing, in either order.
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise InvalidScheduleError(
            f"betas must lie in (0, 1), got {beta_start} and {beta_end}"
        )

    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    previous = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = betas * (1.0 - previous) / (1.0 - alpha_bars)
    return NoiseSchedule(betas, alphas, alpha_bars, posterior)


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(config.kind, config.steps, config.beta_start, config.beta_end)


def _per_sample(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    """Gather `values[t]` and shape it to broadcast over a batch of rank `ndim`."""
    v = values[t]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def forward_noise(
    x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    `t` is a single step or one step per leading-axis entry of `x0`."""
    if x0.shape != eps.shape:
        raise DimensionError("forward_noise", x0.shape, eps.shape)
    t = schedule.check_timesteps(t)
    ab = _per_sample(schedule.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(z_t, eps_hat, t: int, schedule: NoiseSchedule):
    """One-step estimate of the clean sample from a noise prediction.

    Works on plain arrays and on `NdArray`s; with an `NdArray` prediction the
    result stays on the tape so gradients reach the prediction."""
    t = int(schedule.check_timesteps(t))
    ab = float(schedule.alpha_bars[t])
    if ab < MIN_ALPHA_BAR:
        raise DegenerateScheduleError(t, ab)
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


@dataclass
class History:
    """Clean frames from the end of the previous clip."""

    frames: np.ndarray
    """(history_len, dim) frame vectors, right-aligned."""

    valid: np.ndarray
    """(history_len,) frame validity; False where there was no previous frame."""

    hand_mask: np.ndarray
    """(history_len, 2) per-hand validity."""

    @classmethod
    def empty(cls, length: int, dim: int, fill: float = 0.0) -> History:
        return cls(
            np.full((length, dim), fill),
            np.zeros(length, dtype=bool),
            np.zeros((length, 2), dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.valid)


def assemble_input(
    x: np.ndarray,
    histories: Sequence[History],
    frame_mask: np.ndarray,
    hand_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Prepend history to the current region.

    x (B, capacity, D), frame_mask (B, capacity), hand_mask (B, capacity, 2)
    become (B, history_len + capacity, ...)."""
    if len(histories) != x.shape[0]:
        raise DimensionError("assemble_input", x.shape, (len(histories),))
    frames = np.stack([h.frames for h in histories])
    valid = np.stack([h.valid for h in histories])
    hands = np.stack([h.hand_mask for h in histories]) & valid[..., None]
    return (
        np.concatenate([frames, x], axis=1),
        np.concatenate([valid, frame_mask.astype(bool)], axis=1),
        np.concatenate([hands, hand_mask.astype(bool)], axis=1),
    )


class Denoiser(Protocol):
    history_len: int
    capacity: int
    motion_dim: int

    def denoise(
        self,
        x: np.ndarray,
        t: np.ndarray,
        conditions: Sequence[ConditionBundle],
        frame_mask: np.ndarray,
        hand_mask: np.ndarray,
    ) -> ad.NdArray: ...


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    """(B, capacity, D) clean frames; padding content is never read."""

    t: np.ndarray
    """(B,) diffusion step per clip."""

    eps: np.ndarray
    """(B, capacity, D) standard normal noise."""

    mask: np.ndarray
    """(B, capacity) frame validity; False beyond the clip length."""

    history: list[History]
    conditions: list[ConditionBundle]
    seed: Optional[int] = None

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def hand_mask(self) -> np.ndarray:
        return np.stack([c.hand_mask for c in self.conditions])


def loss_weights(
    frame_mask: np.ndarray, hand_mask: np.ndarray, dim: int
) -> np.ndarray:
    """(B, F, dim) element weights: frame validity everywhere, and each hand's
    parameter slots further gated by that hand's validity bit."""
    w = np.repeat(frame_mask.astype(np.float64)[..., None], dim, axis=-1)
    hands = hand_mask.astype(np.float64)
    w[..., :HAND_VALUES] *= hands[..., 0:1]
    w[..., HAND_VALUES:MOTION_VALUES] *= hands[..., 1:2]
    return w


def training_loss(
    model: Denoiser, batch: DiffusionBatch, schedule: NoiseSchedule
) -> ad.NdArray:
    """Masked mean of (eps - eps_hat)^2 over the valid current region."""
    # Padding may hold anything, NaN included; only valid entries are used.
    x0 = np.where(batch.mask[..., None], batch.x0, 0.0)
    x_t = forward_noise(x0, batch.t, batch.eps, schedule)
    x, frame_mask, hand_mask = assemble_input(
        x_t, batch.history, batch.mask, batch.hand_mask
    )
    eps_hat = model.denoise(x, batch.t, batch.conditions, frame_mask, hand_mask)
    if eps_hat.shape != x.shape:
        raise DimensionError("training_loss", eps_hat.shape, x.shape)

    h = x.shape[1] - batch.x0.shape[1]
    weights = np.zeros(x.shape)
    weights[:, h:] = loss_weights(batch.mask, batch.hand_mask, x.shape[-1])
    count = weights.sum()
    if count == 0:
        raise DegenerateLossError()

    target = np.zeros(x.shape)
    target[:, h:] = batch.eps
    diff = ad.sub(eps_hat, ad.constant(target))
    weighted = ad.mul(ad.mul(diff, diff), ad.constant(weights))
    return ad.scale(ad.sum(weighted), 1.0 / count)


def sample(
    model: Denoiser,
    schedule: NoiseSchedule,
    length: int,
    condition: ConditionBundle,
    history: Optional[History],
    rng: np.random.Generator,
    clean_final_step: bool = True,
) -> np.ndarray:
    """Ancestral sampling of one clip; returns (length, D).

    The history region is overwritten with the clean frames before every
    model call. With `clean_final_step` the last step adds no noise."""
    if not 1 <= length <= model.capacity:
        raise ContractError(
            f"sample length {length} outside [1, {model.capacity}]"
        )
    if history is None:
        history = History.empty(model.history_len, model.motion_dim)
    if len(history) != model.history_len:
        raise DimensionError(
            "sample", (len(history), model.motion_dim), (model.history_len, model.motion_dim)
        )

    shape = (1, model.capacity, model.motion_dim)
    frame_mask = (np.arange(model.capacity) < length)[None]
    hand_mask = condition.hand_mask[None]
    h = model.history_len

    x = rng.standard_normal(shape)
    for t in reversed(range(schedule.T)):
        inp, fm, hm = assemble_input(x, [history], frame_mask, hand_mask)
        eps_hat = model.denoise(inp, np.array([t]), [condition], fm, hm).data[:, h:]
        beta = schedule.betas[t]
        mean = (x - beta / math.sqrt(1.0 - schedule.alpha_bars[t]) * eps_hat) / math.sqrt(
            schedule.alphas[t]
        )
        if t > 0:
            sigma = math.sqrt(schedule.posterior_variance[t])
        else:
            sigma = 0.0 if clean_final_step else math.sqrt(beta)
        x = mean + sigma * rng.standard_normal(shape) if sigma > 0 else mean
        logger.debug("sample step %d", t)
    return x[0, :length].copy()
