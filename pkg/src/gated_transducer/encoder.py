"""Streaming transformer encoder pieces: chunk masks, frame stacking,
sinusoidal positions, and pre-norm self-attention layers.

Attention is causal at chunk granularity: a query frame sees its own chunk
(including frames later in the same chunk) plus a fixed number of chunks of
left context, and nothing beyond its chunk's end. Perturbing frames past
that boundary must leave earlier outputs bit-identical, which holds because
masked attention weights are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .seeding import he_uniform

__all__ = [
    "EncoderConfig",
    "build_chunk_mask",
    "stack_frames",
    "sinusoidal_positions",
    "TransformerLayer",
    "Frontend",
]


@dataclass
class EncoderConfig:
    model_dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    chunk_size: int = 4
    left_chunks: int = 4
    downsample_factor: int = 4

    def __post_init__(self):
        if self.model_dim < 1 or self.ffn_dim < 1:
            raise ContractError(f"encoder dims must be positive: {self}")
        if self.heads < 1 or self.model_dim % self.heads != 0:
            raise ContractError(
                f"heads ({self.heads}) must divide model_dim ({self.model_dim})"
            )
        if self.chunk_size < 1 or self.left_chunks < 0 or self.downsample_factor < 1:
            raise ContractError(f"bad streaming geometry: {self}")


def build_chunk_mask(frame_count, chunk_size, left_chunks):
    """Boolean (T, T) mask; True where query row may attend to key column."""
    if frame_count < 1:
        raise ContractError(f"mask needs at least one frame, got {frame_count}")
    if chunk_size < 1 or left_chunks < 0:
        raise ContractError(
            f"bad mask geometry: chunk_size={chunk_size}, left_chunks={left_chunks}"
        )
    chunk = np.arange(frame_count) // chunk_size
    cq = chunk[:, None]
    ck = chunk[None, :]
    return (ck <= cq) & (ck >= cq - left_chunks)


def stack_frames(features, factor):
    """Concatenate each run of ``factor`` frames into one row, zero-padding
    the tail, so (T, F) becomes (ceil(T/factor), F*factor)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError(f"stack_frames: expected (T, F), got {features.shape}")
    t_frames, width = features.shape
    if t_frames < 1:
        raise ContractError("stack_frames: empty input")
    if factor < 1:
        raise ContractError(f"stack_frames: factor must be >= 1, got {factor}")
    out_frames = -(-t_frames // factor)
    padded = np.zeros((out_frames * factor, width), dtype=np.float64)
    padded[:t_frames] = features
    return padded.reshape(out_frames, factor * width)


def sinusoidal_positions(length, dim):
    """Fixed sine/cosine position table of shape (length, dim)."""
    if length < 1 or dim < 1:
        raise ContractError(f"bad position table shape ({length}, {dim})")
    positions = np.arange(length, dtype=np.float64)[:, None]
    index = np.arange(dim, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * (index // 2) / dim)
    table = np.where(index % 2 == 0, np.sin(angles), np.cos(angles))
    return table


class TransformerLayer:
    """Pre-norm self-attention plus feed-forward, both residual.

    The attention output projection and the second feed-forward matrix start
    at zero, so a fresh layer is exactly the identity map.
    """

    def __init__(self, model_dim, heads, ffn_dim, rng, eps=1e-5):
        if model_dim % heads != 0:
            raise ContractError(f"heads ({heads}) must divide model_dim ({model_dim})")
        self.model_dim = model_dim
        self.heads = heads
        self.eps = eps
        d = model_dim

        def proj():
            return Tensor(he_uniform(rng, (d, d), d), requires_grad=True)

        def vec(n, fill=0.0):
            return Tensor(np.full(n, fill), requires_grad=True)

        self.wq, self.wk, self.wv = proj(), proj(), proj()
        self.wo = Tensor(np.zeros((d, d)), requires_grad=True)
        self.bq, self.bk, self.bv, self.bo = vec(d), vec(d), vec(d), vec(d)
        self.ln1_scale, self.ln1_shift = vec(d, 1.0), vec(d)
        self.ln2_scale, self.ln2_shift = vec(d, 1.0), vec(d)
        self.ffn_w1 = Tensor(he_uniform(rng, (d, ffn_dim), d), requires_grad=True)
        self.ffn_b1 = vec(ffn_dim)
        self.ffn_w2 = Tensor(np.zeros((ffn_dim, d)), requires_grad=True)
        self.ffn_b2 = vec(d)

    def _attend(self, x, mask):
        q = x @ self.wq + self.bq
        k = x @ self.wk + self.bk
        v = x @ self.wv + self.bv
        head_dim = self.model_dim // self.heads
        scale = Tensor(1.0 / np.sqrt(head_dim))
        contexts = []
        for h in range(self.heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh = ad.slice_axis(q, lo, hi, axis=1)
            kh = ad.slice_axis(k, lo, hi, axis=1)
            vh = ad.slice_axis(v, lo, hi, axis=1)
            scores = ad.mul(qh @ ad.transpose(kh), scale)
            weights = ad.softmax(scores, axis=1, mask=mask)
            contexts.append(weights @ vh)
        merged = contexts[0] if len(contexts) == 1 else ad.concat(contexts, axis=1)
        return merged @ self.wo + self.bo

    def forward(self, x, mask):
        if x.values.ndim != 2 or x.shape[1] != self.model_dim:
            raise DimensionError(
                f"layer expects (T, {self.model_dim}), got {x.shape}"
            )
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (x.shape[0], x.shape[0]):
            raise DimensionError(
                f"mask shape {mask.shape} does not match {x.shape[0]} frames"
            )
        normed = ad.mul(ad.layer_norm(x, self.eps), self.ln1_scale) + self.ln1_shift
        x = x + self._attend(normed, mask)
        normed = ad.mul(ad.layer_norm(x, self.eps), self.ln2_scale) + self.ln2_shift
        hidden = ad.relu(normed @ self.ffn_w1 + self.ffn_b1)
        return x + (hidden @ self.ffn_w2 + self.ffn_b2)

    def named_parameters(self, prefix=""):
        fields = (
            ("wq", self.wq), ("bq", self.bq), ("wk", self.wk), ("bk", self.bk),
            ("wv", self.wv), ("bv", self.bv), ("wo", self.wo), ("bo", self.bo),
            ("ln1_scale", self.ln1_scale), ("ln1_shift", self.ln1_shift),
            ("ln2_scale", self.ln2_scale), ("ln2_shift", self.ln2_shift),
            ("ffn_w1", self.ffn_w1), ("ffn_b1", self.ffn_b1),
            ("ffn_w2", self.ffn_w2), ("ffn_b2", self.ffn_b2),
        )
        for name, tensor in fields:
            yield f"{prefix}{name}", tensor


class Frontend:
    """Frame stacking followed by a linear projection to the model width."""

    def __init__(self, input_dim, factor, model_dim, rng):
        self.input_dim = input_dim
        self.factor = factor
        stacked = input_dim * factor
        self.weight = Tensor(he_uniform(rng, (stacked, model_dim), stacked), requires_grad=True)
        self.bias = Tensor(np.zeros(model_dim), requires_grad=True)

    def project(self, features):
        stacked = stack_frames(features, self.factor)
        if stacked.shape[1] != self.weight.shape[0]:
            raise DimensionError(
                f"frontend expects feature width {self.input_dim}, "
                f"got {np.asarray(features).shape[1]}"
            )
        return Tensor(stacked) @ self.weight + self.bias

    def named_parameters(self, prefix=""):
        yield f"{prefix}weight", self.weight
        yield f"{prefix}bias", self.bias
