"""Gated per-language expert blocks for the encoder.

A block runs one transformer stack per active language, scores the stacks
with a small gate network, mixes them with a softmax restricted to the
active languages, and finishes with layers shared across languages. The
language-indicator vector is a hard mask: inactive experts are never even
computed, which is observationally identical to weighting them by zero.
The per-block gate logits also feed an auxiliary language-identification
loss so the gate learns to pick the right expert when every language is
marked active.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .seeding import he_uniform

__all__ = [
    "validate_lid",
    "one_hot_lid",
    "all_ones_lid",
    "GateParams",
    "MultilingualBlock",
    "gate_logits",
    "combine_experts",
    "run_block",
    "lid_loss",
]


def validate_lid(lid, n_languages):
    """0/1 indicator vector over languages with at least one language active."""
    lid = np.asarray(lid)
    if lid.shape != (n_languages,):
        raise ContractError(f"lid shape {lid.shape} != ({n_languages},)")
    lid = lid.astype(np.int64)
    if not np.all((lid == 0) | (lid == 1)):
        raise ContractError(f"lid entries must be 0 or 1, got {lid.tolist()}")
    if lid.sum() < 1:
        raise ContractError("lid must mark at least one language active")
    return lid


def one_hot_lid(language, n_languages):
    if not 0 <= language < n_languages:
        raise ContractError(f"language {language} outside [0, {n_languages})")
    lid = np.zeros(n_languages, dtype=np.int64)
    lid[language] = 1
    return lid


def all_ones_lid(n_languages):
    return np.ones(n_languages, dtype=np.int64)


class GateParams:
    """Per-expert input projections and a shared output projection."""

    def __init__(self, n_languages, model_dim, gate_hidden, rng):
        self.n_languages = n_languages
        self.w_in = [
            Tensor(he_uniform(rng, (model_dim, gate_hidden), model_dim), requires_grad=True)
            for _ in range(n_languages)
        ]
        self.w_out = Tensor(
            he_uniform(rng, (gate_hidden, n_languages), gate_hidden), requires_grad=True
        )

    def named_parameters(self, prefix=""):
        for i, w in enumerate(self.w_in):
            yield f"{prefix}w_in{i}", w
        yield f"{prefix}w_out", self.w_out


def gate_logits(expert_outputs, lid, gate):
    """Per-frame language logits from the active experts' outputs.

    Active experts' frames are projected, summed, squashed, and projected to
    one logit per language. Inactive positions in ``expert_outputs`` may be
    None; with every language active this is the plain ungated formula.
    """
    lid = validate_lid(lid, gate.n_languages)
    total = None
    for i in range(gate.n_languages):
        if lid[i] == 0:
            continue
        if expert_outputs[i] is None:
            raise ContractError(f"active language {i} has no expert output")
        term = expert_outputs[i] @ gate.w_in[i]
        total = term if total is None else total + term
    return ad.tanh(total) @ gate.w_out


def combine_experts(expert_outputs, logits, lid):
    """Mix expert outputs with softmax weights over active languages only."""
    lid = validate_lid(lid, logits.shape[1])
    frames = logits.shape[0]
    column_mask = np.broadcast_to(lid.astype(bool), (frames, lid.shape[0]))
    weights = ad.softmax(logits, axis=1, mask=column_mask)
    combined = None
    for i in np.flatnonzero(lid):
        column = ad.slice_axis(weights, int(i), int(i) + 1, axis=1)
        term = ad.row_scale(expert_outputs[i], column)
        combined = term if combined is None else combined + term
    return combined, weights


class MultilingualBlock:
    """N expert stacks, a gate, and shared layers on top."""

    def __init__(self, expert_stacks, gate, shared_layers):
        if len(expert_stacks) != gate.n_languages:
            raise ContractError(
                f"{len(expert_stacks)} expert stacks but gate covers {gate.n_languages}"
            )
        self.expert_stacks = expert_stacks
        self.gate = gate
        self.shared_layers = shared_layers

    @property
    def n_languages(self):
        return self.gate.n_languages

    def named_parameters(self, prefix=""):
        for i, stack in enumerate(self.expert_stacks):
            for j, layer in enumerate(stack):
                yield from layer.named_parameters(f"{prefix}expert{i}.layer{j}.")
        yield from self.gate.named_parameters(f"{prefix}gate.")
        for j, layer in enumerate(self.shared_layers):
            yield from layer.named_parameters(f"{prefix}shared{j}.")


def run_block(x, lid, block, mask):
    """Run one multilingual block; returns (output frames, gate logits).

    Experts for inactive languages are skipped outright: their parameters
    appear nowhere in the graph, so no gradient can reach them.
    """
    lid = validate_lid(lid, block.n_languages)
    expert_outputs = [None] * block.n_languages
    for i in np.flatnonzero(lid):
        h = x
        for layer in block.expert_stacks[i]:
            h = layer.forward(h, mask)
        expert_outputs[i] = h
    logits = gate_logits(expert_outputs, lid, block.gate)
    combined, _ = combine_experts(expert_outputs, logits, lid)
    for layer in block.shared_layers:
        combined = layer.forward(combined, mask)
    return combined, logits


def lid_loss(block_logits, true_language, pooled=False):
    """Cross-entropy of the summed per-block gate logits against the true
    language, averaged over frames (or over one frame-pooled logit row)."""
    if not block_logits:
        raise ContractError("lid_loss needs at least one block's logits")
    total = block_logits[0]
    for logits in block_logits[1:]:
        if logits.shape != total.shape:
            raise DimensionError(
                f"block logit shapes differ: {logits.shape} vs {total.shape}"
            )
        total = total + logits
    n_languages = total.shape[1]
    if not 0 <= true_language < n_languages:
        raise ContractError(
            f"true language {true_language} outside [0, {n_languages})"
        )
    if pooled:
        total = ad.mean_(total, axis=0, keepdims=True)
    targets = np.full(total.shape[0], true_language, dtype=np.int64)
    return ad.cross_entropy_with_logits(total, targets)
