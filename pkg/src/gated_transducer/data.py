"""Synthetic multilingual corpora with controllable acoustic confusability.

Each language owns a disjoint slice of a merged token inventory (index 0 is
reserved for blank) and a unit-norm prototype vector per token. A fraction
``confusability`` of each language's tokens shares its prototype with a
token of another language: such tokens sound identical but must be
transcribed with different ids, so they can only be resolved by knowing or
inferring the language. Utterances repeat each token's prototype for a few
frames and add Gaussian noise.

On-disk format: a plain-text key=value manifest plus one binary file per
split and language. Records are little-endian and length-prefixed:

    u32  byte length of the rest of the record
    i32  language id
    i32  U (token count), then U * i32 token ids
    i32  T (frame count)
    i32  F (feature width)
    f64 * (T*F) features, row-major

Rebuilding with the same seed reproduces the files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import substream

__all__ = [
    "DataError",
    "ToyLanguageSpec",
    "Utterance",
    "make_language_specs",
    "generate_utterance",
    "build_corpus",
    "write_split",
    "read_split",
    "load_corpus",
    "read_manifest",
    "spec_fingerprint",
]


class DataError(ValueError):
    pass


@dataclass
class ToyLanguageSpec:
    index: int
    vocab: list  # merged-inventory token ids owned by this language
    prototypes: np.ndarray  # (len(vocab), feature_dim), unit rows
    min_frames: int
    max_frames: int
    noise_sigma: float
    confusable_pairs: list = field(default_factory=list)  # (own id, partner id)


@dataclass
class Utterance:
    features: np.ndarray  # (T, feature_dim) float64
    tokens: list
    lid: int


def _unit_vector(rng, dim, existing, max_dot=0.95):
    """A fresh unit vector not nearly collinear with any existing prototype."""
    while True:
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ e)) <= max_dot for e in existing):
            return v


def make_language_specs(
    n_languages,
    vocab_per_lang,
    feature_dim,
    confusability,
    rng,
    min_frames=2,
    max_frames=4,
    noise_sigma=0.3,
):
    """Language specs over a merged inventory of 1 + N * vocab_per_lang tokens.

    The first floor(confusability * vocab_per_lang) tokens of each language
    share their prototype with the same-position token of the next language
    (cyclically), so every confusable token has a cross-language twin.
    Returns (specs, merged_vocab_size).
    """
    if n_languages < 1 or vocab_per_lang < 1 or feature_dim < 1:
        raise DataError(
            f"bad corpus shape: N={n_languages}, vocab={vocab_per_lang}, F={feature_dim}"
        )
    if not 0.0 <= confusability <= 1.0:
        raise DataError(f"confusability must be in [0, 1], got {confusability}")
    if not 1 <= min_frames <= max_frames:
        raise DataError(f"bad frames-per-token range [{min_frames}, {max_frames}]")
    if noise_sigma < 0:
        raise DataError(f"noise sigma must be non-negative, got {noise_sigma}")
    n_shared = int(confusability * vocab_per_lang)
    drawn = []
    shared = []
    for _ in range(n_shared):
        v = _unit_vector(rng, feature_dim, drawn)
        shared.append(v)
        drawn.append(v)
    own = []
    for _ in range(n_languages):
        rows = []
        for _ in range(n_shared, vocab_per_lang):
            v = _unit_vector(rng, feature_dim, drawn)
            rows.append(v)
            drawn.append(v)
        own.append(rows)
    specs = []
    for lang in range(n_languages):
        vocab = [1 + lang * vocab_per_lang + j for j in range(vocab_per_lang)]
        prototypes = np.vstack(shared + own[lang]) if vocab_per_lang else np.zeros((0, feature_dim))
        partner_lang = (lang + 1) % n_languages
        pairs = [
            (vocab[j], 1 + partner_lang * vocab_per_lang + j) for j in range(n_shared)
        ] if n_languages > 1 else []
        specs.append(
            ToyLanguageSpec(
                index=lang,
                vocab=vocab,
                prototypes=prototypes,
                min_frames=min_frames,
                max_frames=max_frames,
                noise_sigma=noise_sigma,
                confusable_pairs=pairs,
            )
        )
    return specs, 1 + n_languages * vocab_per_lang


def generate_utterance(spec, token_range, rng):
    """Sample one utterance: U tokens, each held for a few noisy frames.

    The opening token is always drawn from the language-unique part of the
    vocabulary (when one exists), the way real speech carries identifiable
    phonotactics from the start; later tokens may be cross-language twins.
    Draw order is fixed (U, token ids, unique opener, then per-token frame
    count and noise) so a given stream always yields the same utterance.
    """
    lo, hi = token_range
    if not 1 <= lo <= hi:
        raise DataError(f"bad token-count range [{lo}, {hi}]")
    n_tokens = int(rng.integers(lo, hi + 1))
    positions = rng.integers(0, len(spec.vocab), size=n_tokens)
    n_shared = len(spec.confusable_pairs)
    if n_shared < len(spec.vocab):
        positions[0] = n_shared + int(rng.integers(0, len(spec.vocab) - n_shared))
    tokens = [spec.vocab[int(pos)] for pos in positions]
    rows = []
    for pos in positions:
        frames = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        prototype = spec.prototypes[int(pos)]
        noise = rng.normal(0.0, spec.noise_sigma, size=(frames, prototype.shape[0]))
        rows.append(prototype[None, :] + noise)
    return Utterance(features=np.vstack(rows), tokens=tokens, lid=spec.index)


def spec_fingerprint(specs):
    payload = [
        {
            "index": s.index,
            "vocab": list(s.vocab),
            "prototypes": np.asarray(s.prototypes).tolist(),
            "frames": [s.min_frames, s.max_frames],
            "sigma": s.noise_sigma,
            "pairs": [list(p) for p in s.confusable_pairs],
        }
        for s in specs
    ]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_split(path, utterances):
    with open(path, "wb") as fh:
        for utt in utterances:
            features = np.ascontiguousarray(utt.features, dtype="<f8")
            t_frames, width = features.shape
            body = struct.pack("<ii", utt.lid, len(utt.tokens))
            body += struct.pack(f"<{len(utt.tokens)}i", *utt.tokens)
            body += struct.pack("<ii", t_frames, width)
            body += features.tobytes()
            fh.write(struct.pack("<I", len(body)))
            fh.write(body)


def read_split(path):
    utterances = []
    with open(path, "rb") as fh:
        while True:
            prefix = fh.read(4)
            if not prefix:
                break
            (length,) = struct.unpack("<I", prefix)
            body = fh.read(length)
            if len(body) != length:
                raise DataError(f"{path}: truncated record")
            lid, n_tokens = struct.unpack_from("<ii", body, 0)
            offset = 8
            tokens = list(struct.unpack_from(f"<{n_tokens}i", body, offset))
            offset += 4 * n_tokens
            t_frames, width = struct.unpack_from("<ii", body, offset)
            offset += 8
            features = np.frombuffer(
                body, dtype="<f8", count=t_frames * width, offset=offset
            ).reshape(t_frames, width).copy()
            utterances.append(Utterance(features=features, tokens=tokens, lid=lid))
    return utterances


def build_corpus(
    specs,
    out_dir,
    seed,
    train_per_lang,
    test_per_lang,
    token_range,
    extra_manifest=None,
):
    """Generate and write train/test splits plus the manifest.

    Each record draws from its own (seed, split, language, index) stream, so
    the content of a record does not depend on how many others exist and the
    two splits are disjoint by construction of the stream names.
    """
    if train_per_lang < 1 or test_per_lang < 1:
        raise DataError("each split needs at least one utterance per language")
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": "gated-transducer-corpus-v1",
        "n_languages": len(specs),
        "feature_dim": int(specs[0].prototypes.shape[1]),
        "vocab_size": 1 + sum(len(s.vocab) for s in specs),
        "seed": int(seed),
        "min_tokens": token_range[0],
        "max_tokens": token_range[1],
        "min_frames": specs[0].min_frames,
        "max_frames": specs[0].max_frames,
        "noise_sigma": specs[0].noise_sigma,
        "train_per_lang": train_per_lang,
        "test_per_lang": test_per_lang,
        "spec_hash": spec_fingerprint(specs),
    }
    manifest.update(extra_manifest or {})
    for split, count in (("train", train_per_lang), ("test", test_per_lang)):
        for spec in specs:
            utterances = [
                generate_utterance(
                    spec, token_range, substream(seed, "corpus", split, spec.index, i)
                )
                for i in range(count)
            ]
            write_split(os.path.join(out_dir, f"{split}_{spec.index}.bin"), utterances)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for key in sorted(manifest):
            fh.write(f"{key}={manifest[key]}\n")
    return manifest


def read_manifest(path):
    manifest = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            manifest[key] = value
    return manifest


def load_corpus(corpus_dir):
    """{"train": {lang: [Utterance]}, "test": {...}, "manifest": {...}}."""
    manifest = read_manifest(os.path.join(corpus_dir, "manifest.txt"))
    n_languages = int(manifest["n_languages"])
    corpus = {"manifest": manifest}
    for split in ("train", "test"):
        by_lang = {}
        for lang in range(n_languages):
            by_lang[lang] = read_split(os.path.join(corpus_dir, f"{split}_{lang}.bin"))
        corpus[split] = by_lang
    return corpus
