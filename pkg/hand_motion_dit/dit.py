"""The Stage-1 denoiser: a diffusion transformer over per-frame tokens.

Frames (history ++ current region) are projected to tokens, receive learned
position and per-hand mask embeddings, and pass through `depth` blocks of
self-attention, audio cross-attention and an MLP. The timestep is injected
AdaLN-single style: one shared projection turns the global condition into
shift/scale/gate vectors, and each block adds its own learned offset to them.
The global condition is the timestep MLP output plus the style, amplitude,
root-offset and reference-context embeddings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hand_motion_dit import autodiff as ad
from hand_motion_dit.conditioning import (
    BucketEmbedding,
    ConditionBundle,
    OffsetEmbedding,
    ReferenceEmbedding,
    StyleEmbedding,
    default_bucket_spec,
)
from hand_motion_dit.errors import DimensionError, InvalidConfigError
from hand_motion_dit.kinematics import MOTION_VALUES

logger = logging.getLogger(__name__)

MASK_BIAS = -1e30
NORM_EPS = 1e-6


@dataclass
class DiTConfig:
    depth: int = 4
    """Number of DiT blocks."""

    hidden: int = 64
    """Token width."""

    heads: int = 4
    """Attention heads; must divide `hidden`."""

    capacity: int = 64
    """Frames in the current (generated) region."""

    history_len: int = 8
    """Clean frames taken from the end of the previous clip."""

    keypoint_count: int = 13
    """Upper-body keypoints generated alongside the hands."""

    audio_dim: int = 16
    style_count: int = 3
    bucket_count: int = 8
    """Amplitude buckets per hand."""

    bucket_low: float = 1e-4
    bucket_high: float = 1e-1
    ref_dim: int = 0
    """Width of reference-context vectors; 0 disables the embedding."""

    frequency_dim: int = 64
    """Width of the sinusoidal timestep features."""

    def __post_init__(self):
        if self.hidden % self.heads:
            raise InvalidConfigError(
                "model", f"hidden {self.hidden} is not divisible by heads {self.heads}"
            )
        if self.capacity < self.history_len + 1:
            raise InvalidConfigError(
                "model", f"capacity {self.capacity} must exceed history_len {self.history_len}"
            )
        if self.frequency_dim % 2:
            raise InvalidConfigError("model", "frequency_dim must be even")

    @property
    def motion_dim(self) -> int:
        return MOTION_VALUES + 2 * self.keypoint_count

    @property
    def sequence_length(self) -> int:
        return self.history_len + self.capacity


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """(B, dim) features [cos(t f_i), sin(t f_i)] with geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def modulate(x: ad.NdArray, shift: ad.NdArray, scale: ad.NdArray) -> ad.NdArray:
    """x * (1 + scale) + shift, with (B, H) shift/scale repeated over tokens."""
    n = x.shape[1]
    return ad.add(
        ad.add(x, ad.mul(x, ad.repeat_axis(scale, 1, n))), ad.repeat_axis(shift, 1, n)
    )


def key_mask_bias(key_valid: np.ndarray, queries: int) -> np.ndarray:
    """(B, queries, keys) additive bias removing invalid keys from the softmax."""
    bias = np.where(np.asarray(key_valid, dtype=bool), 0.0, MASK_BIAS)
    return np.repeat(bias[:, None, :], queries, axis=1)


def attention(
    q: ad.NdArray,
    k: ad.NdArray,
    v: ad.NdArray,
    heads: int,
    key_valid: Optional[np.ndarray] = None,
) -> ad.NdArray:
    """Multi-head scaled dot-product attention on projected (B, L, H) inputs.
    Bidirectional; keys flagged invalid get zero weight."""
    width = q.shape[-1] // heads
    bias = None
    if key_valid is not None:
        bias = ad.constant(key_mask_bias(key_valid, q.shape[1]))
    outputs = []
    for qh, kh, vh in zip(
        ad.split_lastdim(q, heads), ad.split_lastdim(k, heads), ad.split_lastdim(v, heads)
    ):
        scores = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / math.sqrt(width))
        if bias is not None:
            scores = ad.add(scores, bias)
        outputs.append(ad.matmul(ad.softmax_lastdim(scores), vh))
    return outputs[0] if heads == 1 else ad.concat_lastdim(outputs)


class DiTModel:
    """Parameters and forward pass of the denoiser.

    Parameters are `NdArray`s kept in a name-ordered dictionary; the order is
    fixed by construction so checkpoints and optimizer state line up."""

    def __init__(self, config: DiTConfig, seed: int = 0):
        self.config = config
        self.history_len = config.history_len
        self.capacity = config.capacity
        self.motion_dim = config.motion_dim
        self._params: dict[str, ad.NdArray] = {}
        rng = np.random.default_rng(seed)
        c = config
        h = c.hidden

        self._linear("input", c.motion_dim, h, rng)
        self._embedding("pos_embed", (c.sequence_length, h), rng)
        self._embedding("mask_embed.left", (2, h), rng)
        self._embedding("mask_embed.right", (2, h), rng)
        self._linear("audio", c.audio_dim, h, rng)
        self._embedding("audio_pos_embed", (c.capacity, h), rng)

        self._linear("t_mlp.0", c.frequency_dim, h, rng)
        self._linear("t_mlp.1", h, h, rng)
        self.style = StyleEmbedding(c.style_count, h, rng)
        self.speed = BucketEmbedding(
            default_bucket_spec(c.bucket_count, c.bucket_low, c.bucket_high), h, rng
        )
        self.offset = OffsetEmbedding(h, rng)
        self.reference = ReferenceEmbedding(c.ref_dim, h, rng) if c.ref_dim else None
        for holder in (self.style, self.speed, self.offset, self.reference):
            if holder is not None:
                self._params.update(holder.params())

        self._linear("adaln", h, 6 * h, rng, zero=True)
        for i in range(c.depth):
            p = f"blocks.{i}"
            self._params[f"{p}.adaln_embed"] = ad.parameter(np.zeros(6 * h), f"{p}.adaln_embed")
            for attn in ("attn", "cross"):
                for proj in ("q", "k", "v"):
                    self._linear(f"{p}.{attn}.{proj}", h, h, rng)
                self._linear(f"{p}.{attn}.out", h, h, rng, zero=True)
            self._linear(f"{p}.mlp.fc1", h, 4 * h, rng)
            self._linear(f"{p}.mlp.fc2", 4 * h, h, rng)
        self._linear("final.adaln", h, 2 * h, rng, zero=True)
        self._linear("final.linear", h, c.motion_dim, rng, zero=True)

    def _linear(self, name: str, fan_in: int, fan_out: int, rng, zero: bool = False):
        if zero:
            weight = np.zeros((fan_in, fan_out))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, (fan_in, fan_out))
        self._params[f"{name}.weight"] = ad.parameter(weight, f"{name}.weight")
        self._params[f"{name}.bias"] = ad.parameter(np.zeros(fan_out), f"{name}.bias")

    def _embedding(self, name: str, shape: tuple[int, ...], rng):
        self._params[name] = ad.parameter(rng.normal(0.0, 0.02, shape), name)

    def params(self) -> dict[str, ad.NdArray]:
        return self._params

    def __getitem__(self, name: str) -> ad.NdArray:
        return self._params[name]

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def randomize(self, seed: int, std: float = 0.1) -> None:
        """Overwrite every parameter with N(0, std) draws; zero-initialised
        layers become active, which gradient checks need."""
        rng = np.random.default_rng(seed)
        for p in self._params.values():
            p.data = rng.normal(0.0, std, p.shape)

    def _apply(self, name: str, x: ad.NdArray) -> ad.NdArray:
        return ad.add(ad.matmul(x, self._params[f"{name}.weight"]), self._params[f"{name}.bias"])

    def timestep_embedding(self, t) -> ad.NdArray:
        """Sinusoid of `t` through the 2-layer timestep MLP, (B, hidden)."""
        features = ad.constant(sinusoidal_embedding(t, self.config.frequency_dim))
        return self._apply("t_mlp.1", ad.gelu(self._apply("t_mlp.0", features)))

    def global_condition(self, t, conditions: Sequence[ConditionBundle]) -> ad.NdArray:
        """Timestep embedding plus every clip-level conditioning embedding."""
        c = self.timestep_embedding(t)
        c = ad.add(c, self.style([b.style for b in conditions]))
        c = ad.add(c, self.speed(np.stack([b.amplitude for b in conditions])))
        c = ad.add(c, self.offset(np.stack([b.root_offset for b in conditions])))
        if self.reference is not None:
            c = ad.add(c, self.reference([b.reference for b in conditions]))
        return c

    def adaln_single_modulation(
        self, global_cond: ad.NdArray, block_index: int
    ) -> list[ad.NdArray]:
        """shift, scale, gate for attention then shift, scale, gate for the MLP."""
        if not 0 <= block_index < self.config.depth:
            raise DimensionError("adaln_single_modulation", (block_index,), (self.config.depth,))
        shared = self._apply("adaln", ad.gelu(global_cond))
        mods = ad.add(shared, self._params[f"blocks.{block_index}.adaln_embed"])
        return ad.split_lastdim(mods, 6)

    def embed_tokens(
        self, x: np.ndarray, frame_mask: np.ndarray, hand_mask: np.ndarray
    ) -> ad.NdArray:
        """Frame tokens before the first block, (B, L, hidden)."""
        x = np.where(np.asarray(frame_mask, dtype=bool)[..., None], x, 0.0)
        tokens = ad.add(self._apply("input", ad.constant(x)), self._params["pos_embed"])
        hands = np.asarray(hand_mask, dtype=np.int64)
        tokens = ad.add(tokens, ad.embedding_lookup(self._params["mask_embed.left"], hands[..., 0]))
        return ad.add(tokens, ad.embedding_lookup(self._params["mask_embed.right"], hands[..., 1]))

    def embed_audio(self, conditions: Sequence[ConditionBundle]) -> tuple[ad.NdArray, np.ndarray]:
        valid = np.stack([b.audio_mask for b in conditions]).astype(bool)
        features = np.where(valid[..., None], np.stack([b.audio for b in conditions]), 0.0)
        tokens = ad.add(self._apply("audio", ad.constant(features)), self._params["audio_pos_embed"])
        return tokens, valid

    def _attend(
        self, name: str, queries: ad.NdArray, keys: ad.NdArray, key_valid: np.ndarray
    ) -> ad.NdArray:
        out = attention(
            self._apply(f"{name}.q", queries),
            self._apply(f"{name}.k", keys),
            self._apply(f"{name}.v", keys),
            self.config.heads,
            key_valid,
        )
        return self._apply(f"{name}.out", out)

    def block(
        self,
        index: int,
        tokens: ad.NdArray,
        audio_tokens: ad.NdArray,
        mods: Sequence[ad.NdArray],
        frame_mask: np.ndarray,
        audio_mask: np.ndarray,
    ) -> ad.NdArray:
        p = f"blocks.{index}"
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        n = tokens.shape[1]

        h = modulate(ad.layer_norm(tokens, eps=NORM_EPS), shift1, scale1)
        x = ad.add(tokens, ad.mul(ad.repeat_axis(gate1, 1, n), self._attend(f"{p}.attn", h, h, frame_mask)))
        x = ad.add(x, self._attend(f"{p}.cross", x, audio_tokens, audio_mask))
        h = modulate(ad.layer_norm(x, eps=NORM_EPS), shift2, scale2)
        h = self._apply(f"{p}.mlp.fc2", ad.gelu(self._apply(f"{p}.mlp.fc1", h)))
        return ad.add(x, ad.mul(ad.repeat_axis(gate2, 1, n), h))

    def denoise(
        self,
        x: np.ndarray,
        t,
        conditions: Sequence[ConditionBundle],
        frame_mask: np.ndarray,
        hand_mask: np.ndarray,
    ) -> ad.NdArray:
        """Noise prediction for (B, history_len + capacity, motion_dim) input.

        Values in frames flagged invalid by `frame_mask` are never read."""
        c = self.config
        expected = (len(conditions), c.sequence_length, c.motion_dim)
        if x.shape != expected:
            raise DimensionError("denoise", x.shape, expected)
        if frame_mask.shape != expected[:2] or hand_mask.shape != expected[:2] + (2,):
            raise DimensionError("denoise", frame_mask.shape, hand_mask.shape)
        t = np.broadcast_to(np.asarray(t), (len(conditions),))

        frame_mask = np.asarray(frame_mask, dtype=bool)
        hand_mask = np.asarray(hand_mask, dtype=bool) & frame_mask[..., None]
        tokens = self.embed_tokens(x, frame_mask, hand_mask)
        audio_tokens, audio_mask = self.embed_audio(conditions)

        cond = self.global_condition(t, conditions)
        for i in range(c.depth):
            mods = self.adaln_single_modulation(cond, i)
            tokens = self.block(i, tokens, audio_tokens, mods, frame_mask, audio_mask)

        shift, scale = ad.split_lastdim(self._apply("final.adaln", ad.gelu(cond)), 2)
        out = modulate(ad.layer_norm(tokens, eps=NORM_EPS), shift, scale)
        return self._apply("final.linear", out)


def build_model(config: DiTConfig, seed: int = 0) -> DiTModel:
    model = DiTModel(config, seed)
    logger.info(
        "built model depth=%d hidden=%d with %d parameters",
        config.depth,
        config.hidden,
        model.parameter_count(),
    )
    return model
