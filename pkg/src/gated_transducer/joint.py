"""Prediction network and joint network.

The prediction network is a stacked LSTM over previously emitted tokens,
primed with a start sentinel and zero state. The joint network combines
one encoder frame with one prediction state through learned projections
and a tanh; optionally a bank of per-language linear experts then mixes
``h @ w_i`` terms with weights given by an affine map of the language
indicator, followed by layer normalization. The affine starts at identity
with zero bias so a one-hot indicator initially selects a single expert.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .seeding import he_uniform

__all__ = [
    "PredictionNetwork",
    "JointNetwork",
    "joint_expert_param_count",
]


class PredictionNetwork:
    """LSTM language-model component of the transducer.

    Tokens index an embedding table whose final row is the start sentinel.
    Gate order inside the fused cell matmul is input, forget, candidate,
    output.
    """

    def __init__(self, vocab_size, hidden_dim, depth, rng_for):
        if vocab_size < 2 or hidden_dim < 1 or depth < 1:
            raise ContractError(
                f"bad prediction config: vocab={vocab_size}, dim={hidden_dim}, depth={depth}"
            )
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.depth = depth
        self.start_token = vocab_size
        emb_rng = rng_for("embedding")
        self.embedding = Tensor(
            he_uniform(emb_rng, (vocab_size + 1, hidden_dim), hidden_dim),
            requires_grad=True,
        )
        self.cells = []
        for layer in range(depth):
            rng = rng_for(f"cell{layer}")
            w = Tensor(
                he_uniform(rng, (hidden_dim, 4 * hidden_dim), hidden_dim),
                requires_grad=True,
            )
            u = Tensor(
                he_uniform(rng, (hidden_dim, 4 * hidden_dim), hidden_dim),
                requires_grad=True,
            )
            b = Tensor(np.zeros(4 * hidden_dim), requires_grad=True)
            self.cells.append((w, u, b))

    def initial_state(self):
        zeros = lambda: Tensor(np.zeros((1, self.hidden_dim)))
        return [(zeros(), zeros()) for _ in range(self.depth)]

    def step(self, token, state):
        """Advance one token; returns (output row, new state)."""
        if not 0 <= token <= self.start_token:
            raise ContractError(
                f"token {token} outside [0, {self.start_token}] (sentinel is {self.start_token})"
            )
        if len(state) != self.depth:
            raise ContractError(f"state has {len(state)} layers, expected {self.depth}")
        x = ad.embedding(self.embedding, np.array([token]))
        new_state = []
        h = self.hidden_dim
        for (w, u, b), (h_prev, c_prev) in zip(self.cells, state):
            z = x @ w + (h_prev @ u + b)
            gate_in = ad.sigmoid(ad.slice_axis(z, 0, h, axis=1))
            gate_forget = ad.sigmoid(ad.slice_axis(z, h, 2 * h, axis=1))
            candidate = ad.tanh(ad.slice_axis(z, 2 * h, 3 * h, axis=1))
            gate_out = ad.sigmoid(ad.slice_axis(z, 3 * h, 4 * h, axis=1))
            c = ad.mul(gate_forget, c_prev) + ad.mul(gate_in, candidate)
            x = ad.mul(gate_out, ad.tanh(c))
            new_state.append((x, c))
        return x, new_state

    def forward_sequence(self, tokens):
        """Rows 0..U for the lattice: sentinel first, then each target token."""
        state = self.initial_state()
        out, state = self.step(self.start_token, state)
        rows = [out]
        for token in tokens:
            out, state = self.step(int(token), state)
            rows.append(out)
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)

    def named_parameters(self, prefix=""):
        yield f"{prefix}embedding", self.embedding
        for i, (w, u, b) in enumerate(self.cells):
            yield f"{prefix}cell{i}.w", w
            yield f"{prefix}cell{i}.u", u
            yield f"{prefix}cell{i}.b", b


def joint_expert_param_count(n_languages, joint_dim, ln_affine=True):
    """Exact parameter count added by the joint linear experts."""
    count = n_languages * joint_dim * joint_dim + n_languages * n_languages + n_languages
    if ln_affine:
        count += 2 * joint_dim
    return count


class JointNetwork:
    """tanh joint of encoder and prediction states, with optional
    per-language linear experts, then the output projection to the vocab."""

    def __init__(
        self,
        encoder_dim,
        prediction_dim,
        joint_dim,
        vocab_size,
        n_languages,
        use_experts,
        rng_for,
        ln_affine=True,
        eps=1e-5,
    ):
        self.joint_dim = joint_dim
        self.vocab_size = vocab_size
        self.n_languages = n_languages
        self.use_experts = use_experts
        self.ln_affine = ln_affine
        self.eps = eps
        rng = rng_for("combine")
        self.enc_proj = Tensor(
            he_uniform(rng, (encoder_dim, joint_dim), encoder_dim), requires_grad=True
        )
        self.pred_proj = Tensor(
            he_uniform(rng, (prediction_dim, joint_dim), prediction_dim), requires_grad=True
        )
        self.bias = Tensor(np.zeros(joint_dim), requires_grad=True)
        if use_experts:
            # Experts start identical (each draws the same stream) so the
            # all-ones mixture begins as a single map and the matrices only
            # diverge where the languages actually conflict.
            self.expert_weights = [
                Tensor(
                    he_uniform(rng_for("expert"), (joint_dim, joint_dim), joint_dim),
                    requires_grad=True,
                )
                for _ in range(n_languages)
            ]
            self.gate_weight = Tensor(np.eye(n_languages), requires_grad=True)
            self.gate_bias = Tensor(np.zeros(n_languages), requires_grad=True)
            if ln_affine:
                self.ln_scale = Tensor(np.ones(joint_dim), requires_grad=True)
                self.ln_shift = Tensor(np.zeros(joint_dim), requires_grad=True)
        out_rng = rng_for("output")
        self.out_weight = Tensor(
            he_uniform(out_rng, (joint_dim, vocab_size), joint_dim), requires_grad=True
        )
        self.out_bias = Tensor(np.zeros(vocab_size), requires_grad=True)

    def combine(self, enc_rows, pred_rows):
        """tanh joint over all (frame, label) pairs, one output row each."""
        enc_part = enc_rows @ self.enc_proj
        pred_part = pred_rows @ self.pred_proj
        return ad.tanh(ad.pairwise_sum(enc_part, pred_part) + self.bias)

    def expert_gamma(self, lid):
        lid_row = Tensor(np.asarray(lid, dtype=np.float64)[None, :])
        return lid_row @ self.gate_weight + self.gate_bias

    def expert_prenorm(self, h_joint, lid):
        """Gated sum of per-expert matrix products, before normalization."""
        if not self.use_experts:
            raise ContractError("joint network was built without experts")
        gamma = self.expert_gamma(lid)
        mixed = None
        for i in range(self.n_languages):
            coeff = ad.slice_axis(gamma, i, i + 1, axis=1)
            term = ad.mul(h_joint @ self.expert_weights[i], coeff)
            mixed = term if mixed is None else mixed + term
        return mixed

    def apply_experts(self, h_joint, lid):
        normed = ad.layer_norm(self.expert_prenorm(h_joint, lid), self.eps)
        if self.ln_affine:
            normed = ad.mul(normed, self.ln_scale) + self.ln_shift
        return normed

    def hidden(self, enc_rows, pred_rows, lid):
        h = self.combine(enc_rows, pred_rows)
        if self.use_experts:
            h = self.apply_experts(h, lid)
        return h

    def output_logits(self, hidden):
        return hidden @ self.out_weight + self.out_bias

    def named_parameters(self, prefix=""):
        yield f"{prefix}enc_proj", self.enc_proj
        yield f"{prefix}pred_proj", self.pred_proj
        yield f"{prefix}bias", self.bias
        if self.use_experts:
            for i, w in enumerate(self.expert_weights):
                yield f"{prefix}expert{i}", w
            yield f"{prefix}gate_weight", self.gate_weight
            yield f"{prefix}gate_bias", self.gate_bias
            if self.ln_affine:
                yield f"{prefix}ln_scale", self.ln_scale
                yield f"{prefix}ln_shift", self.ln_shift
        yield f"{prefix}out_weight", self.out_weight
        yield f"{prefix}out_bias", self.out_bias
