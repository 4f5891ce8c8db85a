"""Declarative experiment configuration.

One JSON file with five sections; precedence is command-line --set overrides,
then the file, then DEFAULTS. Unknown sections or keys are rejected by name
so typos fail loudly. The resolved configuration's hash is embedded in every
artifact a run produces.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .model import ModelConfig
from .training import TrainRunConfig

__all__ = [
    "DEFAULTS",
    "ConfigError",
    "resolve_config",
    "apply_override",
    "config_hash",
    "model_config_from",
    "train_config_from",
    "dataset_kwargs_from",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


DEFAULTS = {
    "dataset": {
        "n_languages": 2,
        "vocab_per_lang": 12,
        "feature_dim": 8,
        "confusability": 0.5,
        "min_frames": 2,
        "max_frames": 4,
        "noise_sigma": 0.25,
        "min_tokens": 2,
        "max_tokens": 8,
        "train_per_lang": 800,
        "test_per_lang": 60,
        "seed": 0,
    },
    # The model is deliberately narrow (d=16). Expert capacity only pays for
    # itself when the shared stack is too small to represent both languages
    # at once; at d=32 a single stack absorbs the whole task and the gated
    # and baseline conditions tie.
    "model": {
        "model_dim": 16,
        "heads": 4,
        "ffn_dim": 32,
        "chunk_size": 4,
        "left_chunks": 4,
        "downsample_factor": 4,
        "shared_bottom_depth": 1,
        "n_blocks": 2,
        "expert_depth": 1,
        "shared_depth": 0,
        "prediction_depth": 1,
        "prediction_dim": 16,
        "joint_dim": 16,
        "gate_hidden": 0,
        "lid_weight": 0.3,
        "variant": "gated-expert",
        "use_joint_experts": True,
        "ln_affine": True,
        "lid_loss_pooled": True,
        "layer_norm_eps": 1e-5,
    },
    "training": {
        "total_steps": 3500,
        "batch_size": 8,
        "seed": 0,
        "warmup_steps": 150,
        "lr_scale": 1.0,
        "stage1_frac": 0.25,
        "stage2_frac": 0.50,
        "stage3_frac": 0.25,
        "use_curriculum": True,
        "clip_norm": 5.0,
        "log_wall_time": True,
    },
    "evaluation": {
        "conditions": ["baseline", "oracle-lid", "gated-expert"],
        "seeds": [0, 1, 2],
        "max_symbols_per_frame": 4,
        "gate_mode": "mean",
    },
    "paths": {
        "data_dir": "data",
        "out_dir": "runs",
    },
}


def _merge_section(target, section, values):
    if section not in target:
        raise ConfigError(f"unknown config section {section!r}")
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    for key, value in values.items():
        if key not in target[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        target[section][key] = value


def apply_override(config, assignment):
    """Apply one `section.key=value`; the value is parsed as JSON when it
    can be, otherwise kept as a bare string."""
    key_path, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    section, sep, key = key_path.strip().partition(".")
    if not sep:
        raise ConfigError(f"override key {key_path!r} is not of the form section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    _merge_section(config, section, {key.strip(): value})


def resolve_config(path=None, overrides=()):
    config = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for section, values in data.items():
            _merge_section(config, section, values)
    for assignment in overrides:
        apply_override(config, assignment)
    return config


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def model_config_from(config):
    """ModelConfig with data-dependent dimensions derived from the dataset
    section, so vocabulary and language counts cannot drift apart."""
    dataset = config["dataset"]
    vocab_size = 1 + dataset["n_languages"] * dataset["vocab_per_lang"]
    return ModelConfig(
        n_languages=dataset["n_languages"],
        feature_dim=dataset["feature_dim"],
        vocab_size=vocab_size,
        **config["model"],
    )


def train_config_from(config, **extra):
    kwargs = {"config_hash": config_hash(config), **config["training"], **extra}
    return TrainRunConfig(**kwargs)


def dataset_kwargs_from(config):
    dataset = config["dataset"]
    return {
        "n_languages": dataset["n_languages"],
        "vocab_per_lang": dataset["vocab_per_lang"],
        "feature_dim": dataset["feature_dim"],
        "confusability": dataset["confusability"],
        "min_frames": dataset["min_frames"],
        "max_frames": dataset["max_frames"],
        "noise_sigma": dataset["noise_sigma"],
        "token_range": (dataset["min_tokens"], dataset["max_tokens"]),
        "train_per_lang": dataset["train_per_lang"],
        "test_per_lang": dataset["test_per_lang"],
        "seed": dataset["seed"],
    }
