"""Model variants: one streaming transducer, four encoder wirings.

* baseline: shared encoder stack, no language machinery.
* oracle-lid: baseline with the true language one-hot appended to every raw
  input frame before frame stacking.
* separated: one encoder stack per language for all but the last two layers,
  gate on the per-language outputs, two shared layers on top. Realized as a
  block configuration of the gated encoder, not separate code.
* gated-expert: shared bottom layers, then multilingual expert blocks near
  the output, plus per-language linear experts inside the joint network.

Initialization draws every parameter from a stream named by its function
(for encoder layers: global depth index and expert slot, shared layers
using slot 0), so a gated model with one language reproduces the baseline's
weights bit for bit at equal effective depth.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoder import Frontend, TransformerLayer, build_chunk_mask, sinusoidal_positions
from .experts import GateParams, MultilingualBlock, lid_loss, run_block, validate_lid
from .joint import JointNetwork, PredictionNetwork, joint_expert_param_count
from .seeding import substream
from .transducer import transducer_loss

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "Model",
    "build_model",
    "count_parameters",
    "parameter_count",
    "encode_single_language",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("baseline", "oracle-lid", "separated", "gated-expert")

_VARIANT_ALIASES = {
    "baseline-no-lid": "baseline",
    "separated-encoders": "separated",
}

_CHECKPOINT_MAGIC = b"GTCKPT01"


def canonical_variant(name):
    name = _VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ContractError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass
class ModelConfig:
    n_languages: int = 2
    feature_dim: int = 8
    vocab_size: int = 25
    model_dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    chunk_size: int = 4
    left_chunks: int = 4
    downsample_factor: int = 4
    shared_bottom_depth: int = 1
    n_blocks: int = 1
    expert_depth: int = 1
    shared_depth: int = 1
    prediction_depth: int = 1
    prediction_dim: int = 32
    joint_dim: int = 32
    gate_hidden: int = 0  # 0 means model_dim
    lid_weight: float = 0.1
    variant: str = "gated-expert"
    use_joint_experts: bool = True
    ln_affine: bool = True
    lid_loss_pooled: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.variant in ("baseline", "oracle-lid"):
            self.use_joint_experts = False
        if min(
            self.n_languages, self.feature_dim, self.model_dim, self.ffn_dim,
            self.chunk_size, self.downsample_factor, self.prediction_depth,
            self.prediction_dim, self.joint_dim, self.n_blocks,
        ) < 1:
            raise ContractError(f"non-positive dimension in {self}")
        if self.vocab_size < 1 + self.n_languages:
            raise ContractError(
                f"vocab_size {self.vocab_size} too small for {self.n_languages} languages"
            )
        if self.heads < 1 or self.model_dim % self.heads != 0:
            raise ContractError(
                f"heads ({self.heads}) must divide model_dim ({self.model_dim})"
            )
        if self.left_chunks < 0 or self.shared_bottom_depth < 0:
            raise ContractError(f"negative depth or context in {self}")
        if self.expert_depth < 1 or self.shared_depth < 0:
            raise ContractError(
                f"blocks need expert_depth >= 1 and shared_depth >= 0, got {self}"
            )
        if self.lid_weight < 0:
            raise ContractError(f"lid_weight must be non-negative, got {self.lid_weight}")
        if self.variant == "separated" and self.effective_depth < 3:
            raise ContractError(
                "separated variant needs effective depth >= 3 "
                f"(got {self.effective_depth})"
            )

    @property
    def effective_depth(self):
        return self.shared_bottom_depth + self.n_blocks * (self.expert_depth + self.shared_depth)

    @property
    def gate_width(self):
        return self.gate_hidden if self.gate_hidden > 0 else self.model_dim

    def block_plan(self):
        """(bottom_depth, n_blocks, expert_depth, shared_depth) actually built."""
        if self.variant in ("baseline", "oracle-lid"):
            return self.effective_depth, 0, 0, 0
        if self.variant == "separated":
            return 0, 1, self.effective_depth - 2, 2
        return self.shared_bottom_depth, self.n_blocks, self.expert_depth, self.shared_depth

    @property
    def input_dim(self):
        extra = self.n_languages if self.variant == "oracle-lid" else 0
        return self.feature_dim + extra

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class Model:
    def __init__(self, config, seed):
        self.config = config
        self.seed = int(seed)
        cfg = config
        self.frontend = Frontend(
            cfg.input_dim, cfg.downsample_factor, cfg.model_dim, substream(seed, "frontend")
        )

        def layer_at(depth, slot):
            return TransformerLayer(
                cfg.model_dim, cfg.heads, cfg.ffn_dim,
                substream(seed, "enc_layer", depth, slot), cfg.layer_norm_eps,
            )

        bottom_depth, n_blocks, expert_depth, shared_depth = cfg.block_plan()
        depth = 0
        self.bottom = []
        for _ in range(bottom_depth):
            self.bottom.append(layer_at(depth, 0))
            depth += 1
        self.blocks = []
        for b in range(n_blocks):
            # Every expert stack draws the slot-0 stream: experts start as
            # copies of the layer a plain stack would have, the way the
            # expert models are seeded from a trained shared model, and
            # specialize only through routing.
            stacks = []
            for _ in range(cfg.n_languages):
                stacks.append([layer_at(depth + j, 0) for j in range(expert_depth)])
            depth += expert_depth
            gate = GateParams(
                cfg.n_languages, cfg.model_dim, cfg.gate_width, substream(seed, "enc_gate", b)
            )
            shared = []
            for _ in range(shared_depth):
                shared.append(layer_at(depth, 0))
                depth += 1
            self.blocks.append(MultilingualBlock(stacks, gate, shared))
        self.prediction = PredictionNetwork(
            cfg.vocab_size, cfg.prediction_dim, cfg.prediction_depth,
            lambda name: substream(seed, "prediction", name),
        )
        self.joint = JointNetwork(
            cfg.model_dim, cfg.prediction_dim, cfg.joint_dim, cfg.vocab_size,
            cfg.n_languages, cfg.use_joint_experts,
            lambda name: substream(seed, "joint", name),
            ln_affine=cfg.ln_affine, eps=cfg.layer_norm_eps,
        )
        self._params = list(self._named_parameters())
        names = [n for n, _ in self._params]
        if len(names) != len(set(names)):
            raise ContractError("duplicate parameter names in model")

    @property
    def has_gates(self):
        return bool(self.blocks)

    def _named_parameters(self):
        yield from self.frontend.named_parameters("frontend.")
        for d, layer in enumerate(self.bottom):
            yield from layer.named_parameters(f"encoder.bottom{d}.")
        for b, block in enumerate(self.blocks):
            yield from block.named_parameters(f"encoder.block{b}.")
        yield from self.prediction.named_parameters("prediction.")
        yield from self.joint.named_parameters("joint.")

    def parameters(self):
        return dict(self._params)

    def zero_grad(self):
        for _, p in self._params:
            p.grad = None

    def _with_lid_columns(self, features, lid):
        frames = np.asarray(features, dtype=np.float64)
        columns = np.broadcast_to(lid.astype(np.float64), (frames.shape[0], lid.shape[0]))
        return np.concatenate([frames, columns], axis=1)

    def _check_lid(self, lid):
        lid = validate_lid(lid, self.config.n_languages)
        if self.config.variant == "oracle-lid" and lid.sum() != 1:
            raise ContractError("oracle-lid variant requires a one-hot lid")
        return lid

    def encode(self, features, lid):
        """Encoder frames and per-block gate logits for one utterance."""
        cfg = self.config
        lid = self._check_lid(lid)
        if cfg.variant == "oracle-lid":
            features = self._with_lid_columns(features, lid)
        x = self.frontend.project(features)
        frames = x.shape[0]
        x = x + Tensor(sinusoidal_positions(frames, cfg.model_dim))
        mask = build_chunk_mask(frames, cfg.chunk_size, cfg.left_chunks)
        for layer in self.bottom:
            x = layer.forward(x, mask)
        block_logits = []
        for block in self.blocks:
            x, logits = run_block(x, lid, block, mask)
            block_logits.append(logits)
        return x, block_logits

    def lattice_log_probs(self, enc_rows, tokens, lid):
        pred_rows = self.prediction.forward_sequence(tokens)
        hidden = self.joint.hidden(enc_rows, pred_rows, lid)
        return ad.log_softmax(self.joint.output_logits(hidden), axis=1)

    def forward_loss(self, utterance, lid_vector, lid_weight=None):
        """(total, transducer, lid) losses for one utterance.

        The same lid vector gates both the encoder blocks and the joint
        experts. Variants without gates report a lid loss of exactly zero.
        """
        cfg = self.config
        weight = cfg.lid_weight if lid_weight is None else float(lid_weight)
        enc_rows, block_logits = self.encode(utterance.features, lid_vector)
        log_probs = self.lattice_log_probs(
            enc_rows, utterance.tokens, self._check_lid(lid_vector)
        )
        rnnt = transducer_loss(log_probs, utterance.tokens, frames=enc_rows.shape[0])
        if not block_logits:
            return rnnt, rnnt, Tensor(0.0)
        lid_term = lid_loss(block_logits, utterance.lid, pooled=cfg.lid_loss_pooled)
        total = rnnt + ad.mul(lid_term, Tensor(weight))
        return total, rnnt, lid_term

    def joint_step_logits(self, enc_row, pred_row, lid):
        """Vocabulary logits for one (encoder frame, prediction state) pair."""
        enc = Tensor(np.asarray(enc_row, dtype=np.float64)[None, :])
        hidden = self.joint.hidden(enc, pred_row, self._check_lid(lid))
        return self.joint.output_logits(hidden).values[0]


def build_model(config, seed):
    return Model(config, seed)


def count_parameters(model):
    return int(sum(p.values.size for _, p in model._params))


def parameter_count(config):
    """Closed-form parameter count; must match enumeration exactly."""
    cfg = config
    d, f = cfg.model_dim, cfg.ffn_dim
    per_layer = 4 * d * d + 2 * d * f + 9 * d + f
    bottom, n_blocks, expert_depth, shared_depth = cfg.block_plan()
    n_layers = bottom + n_blocks * (cfg.n_languages * expert_depth + shared_depth)
    gate = cfg.n_languages * d * cfg.gate_width + cfg.gate_width * cfg.n_languages
    encoder = (
        cfg.input_dim * cfg.downsample_factor * d + d
        + n_layers * per_layer
        + n_blocks * gate
    )
    p = cfg.prediction_dim
    prediction = (cfg.vocab_size + 1) * p + cfg.prediction_depth * (8 * p * p + 4 * p)
    j = cfg.joint_dim
    joint = d * j + p * j + j + j * cfg.vocab_size + cfg.vocab_size
    if cfg.use_joint_experts:
        joint += joint_expert_param_count(cfg.n_languages, j, cfg.ln_affine)
    return encoder + prediction + joint


def encode_single_language(model, features, language):
    """Reference path: one language's experts plus the shared layers, no gate.

    Used to check that a one-hot lid reduces the gated encoder to a plain
    single-language encoder.
    """
    cfg = model.config
    if not model.blocks:
        raise ContractError("model has no expert blocks")
    if not 0 <= language < cfg.n_languages:
        raise ContractError(f"language {language} outside [0, {cfg.n_languages})")
    x = model.frontend.project(features)
    frames = x.shape[0]
    x = x + Tensor(sinusoidal_positions(frames, cfg.model_dim))
    mask = build_chunk_mask(frames, cfg.chunk_size, cfg.left_chunks)
    for layer in model.bottom:
        x = layer.forward(x, mask)
    for block in model.blocks:
        for layer in block.expert_stacks[language]:
            x = layer.forward(x, mask)
        for layer in block.shared_layers:
            x = layer.forward(x, mask)
    return x


def save_checkpoint(model, path, step=0, extra=None):
    """Single self-describing binary: JSON header, then raw float64 buffers.

    Saving, loading, and saving again produces byte-identical files.
    """
    arrays = [(name, p.values) for name, p in model._params]
    header = {
        "format": "gated-transducer-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "extra": dict(extra or {}),
        "arrays": [
            {"name": name, "shape": list(values.shape)} for name, values in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, values in arrays:
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, step, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        model = Model(ModelConfig.from_dict(header["config"]), header["seed"])
        params = model.parameters()
        if [a["name"] for a in header["arrays"]] != list(params):
            raise ContractError(f"{path}: parameter inventory mismatch")
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buffer = fh.read(count * 8)
            values = np.frombuffer(buffer, dtype="<f8").reshape(shape).copy()
            target = params[entry["name"]]
            if values.shape != target.values.shape:
                raise ContractError(
                    f"{path}: array {entry['name']} has shape {values.shape}, "
                    f"expected {target.values.shape}"
                )
            target.values = values
    return model, header["step"], header["extra"]
