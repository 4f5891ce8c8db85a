"""Curriculum training loop.

The language-indicator curriculum has three stages over the step budget:
first every utterance passes the true one-hot indicator, then the one-hot
probability p decays linearly to zero, and finally every utterance passes
the all-ones indicator (which is also what inference uses). Each step
samples one indicator per utterance and feeds the same vector to both the
encoder gates and the joint experts.

Optimization is Adam with the inverse-square-root warmup schedule and
global-norm gradient clipping. With one thread (the default everywhere),
a run is bit-for-bit reproducible from (seed, config).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, NumericError, backward
from .experts import all_ones_lid, one_hot_lid
from .model import save_checkpoint
from .seeding import substream

__all__ = [
    "METRICS_COLUMNS",
    "TrainingDiverged",
    "CurriculumSchedule",
    "curriculum_p",
    "sample_lid_vector",
    "warmup_lr",
    "sample_minibatch",
    "Adam",
    "clip_gradients",
    "TrainRunConfig",
    "TrainResult",
    "train",
]

METRICS_COLUMNS = "step,lr,p,loss_total,loss_rnnt,loss_lid,grad_norm,wall_ms"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CurriculumSchedule:
    total_steps: int
    stage1_frac: float = 0.25
    stage2_frac: float = 0.50
    stage3_frac: float = 0.25

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be positive, got {self.total_steps}")
        fracs = (self.stage1_frac, self.stage2_frac, self.stage3_frac)
        if any(f < 0 for f in fracs):
            raise ContractError(f"stage fractions must be non-negative: {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ContractError(f"stage fractions must sum to 1: {fracs}")

    def stage_bounds(self):
        """(first stage-2 step, first stage-3 step)."""
        b1 = round(self.total_steps * self.stage1_frac)
        b2 = round(self.total_steps * (self.stage1_frac + self.stage2_frac))
        return b1, b2


def curriculum_p(step, schedule):
    """Probability of passing the true one-hot indicator at this step."""
    if not 0 <= step < schedule.total_steps:
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps}) for this schedule"
        )
    b1, b2 = schedule.stage_bounds()
    if step < b1:
        return 1.0
    if step >= b2:
        return 0.0
    # Linear decay across stage 2: 1 at its first step boundary, 0 at its end.
    return (b2 - step) / (b2 - b1)


def sample_lid_vector(p, true_language, n_languages, rng):
    """One-hot of the true language with probability p, else all-ones."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"p must be in [0, 1], got {p}")
    if p > 0.0 and rng.random() < p:
        return one_hot_lid(true_language, n_languages)
    return all_ones_lid(n_languages)


def warmup_lr(step, d_model, warmup_steps, scale=1.0):
    """Inverse-square-root schedule with linear warmup; steps are 1-indexed."""
    if step < 1:
        raise ContractError(f"warmup_lr steps are 1-indexed, got {step}")
    if d_model < 1 or warmup_steps < 1:
        raise ContractError(
            f"bad schedule shape: d_model={d_model}, warmup_steps={warmup_steps}"
        )
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def sample_minibatch(corpus_by_lang, weights, batch_size, rng):
    """Draw utterances independently: language by weight, then uniform."""
    languages = sorted(corpus_by_lang)
    if not languages:
        raise ContractError("empty corpus")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(languages),) or weights.min() < 0 or weights.sum() <= 0:
        raise ContractError(f"bad language weights {weights} for {len(languages)} languages")
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    probs = weights / weights.sum()
    batch = []
    for _ in range(batch_size):
        lang = languages[int(rng.choice(len(languages), p=probs))]
        pool = corpus_by_lang[lang]
        if not pool:
            raise ContractError(f"language {lang} has weight but no utterances")
        batch.append(pool[int(rng.integers(0, len(pool)))])
    return batch


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params.items())
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in self.params}
        self.v = {name: np.zeros_like(p.values) for name, p in self.params}

    def step(self, lr):
        """One update over every parameter that received a gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.values = p.values - lr * update


def clip_gradients(params, max_norm):
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class TrainRunConfig:
    total_steps: int = 1000
    batch_size: int = 8
    seed: int = 0
    warmup_steps: int = 100
    lr_scale: float = 1.0
    stage1_frac: float = 0.25
    stage2_frac: float = 0.50
    stage3_frac: float = 0.25
    use_curriculum: bool = True
    lid_weight: float = None  # None: use the model config's weight
    language_weights: list = None  # None: uniform
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    metrics_path: str = None
    checkpoint_path: str = None
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_wall_time: bool = True  # False writes wall_ms=0 for reproducible files
    config_hash: str = ""


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    lid_events: list = field(default_factory=list)  # (step, true lang, kind)
    final_step: int = 0
    checkpoint_path: str = None


def _training_lid(variant, use_curriculum, p, true_language, n_languages, rng):
    if variant == "oracle-lid":
        return one_hot_lid(true_language, n_languages), "onehot"
    if variant == "gated-expert" and use_curriculum:
        lid = sample_lid_vector(p, true_language, n_languages, rng)
        kind = "onehot" if lid.sum() == 1 else "allones"
        return lid, kind
    return all_ones_lid(n_languages), "allones"


def _format_row(row):
    cells = [str(row["step"])]
    for key in ("lr", "p", "loss_total", "loss_rnnt", "loss_lid", "grad_norm"):
        cells.append(repr(float(row[key])))
    cells.append(str(row["wall_ms"]))
    return ",".join(cells)


def train(model, run_config, train_by_lang):
    """Train the model in place; returns metrics and the lid sampling log."""
    cfg = run_config
    variant = model.config.variant
    n_languages = model.config.n_languages
    schedule = CurriculumSchedule(
        cfg.total_steps, cfg.stage1_frac, cfg.stage2_frac, cfg.stage3_frac
    )
    if variant in ("baseline", "oracle-lid"):
        lid_weight = 0.0
    elif cfg.lid_weight is None:
        lid_weight = model.config.lid_weight
    else:
        lid_weight = cfg.lid_weight
    weights = cfg.language_weights
    if weights is None:
        weights = [1.0] * len(train_by_lang)
    optimizer = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng_batch = substream(cfg.seed, "batching")
    rng_curriculum = substream(cfg.seed, "curriculum")
    result = TrainResult()
    metrics_file = None
    if cfg.metrics_path:
        metrics_file = open(cfg.metrics_path, "w", encoding="utf-8")
        metrics_file.write(f"# config={cfg.config_hash}\n")
        metrics_file.write(METRICS_COLUMNS + "\n")
    try:
        for step in range(cfg.total_steps):
            started = time.perf_counter()
            batch = sample_minibatch(train_by_lang, weights, cfg.batch_size, rng_batch)
            p = curriculum_p(step, schedule)
            model.zero_grad()
            total_graph = None
            rnnt_sum = 0.0
            lid_sum = 0.0
            for utt in batch:
                lid, kind = _training_lid(
                    variant, cfg.use_curriculum, p, utt.lid, n_languages, rng_curriculum
                )
                result.lid_events.append((step, utt.lid, kind))
                try:
                    total, rnnt, lid_term = model.forward_loss(utt, lid, lid_weight)
                except NumericError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (seed {cfg.seed}): {exc}"
                    ) from exc
                total_graph = total if total_graph is None else total_graph + total
                rnnt_sum += rnnt.item()
                lid_sum += lid_term.item()
            batch_loss = total_graph * (1.0 / len(batch))
            loss_value = batch_loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (seed {cfg.seed})"
                )
            backward(batch_loss)
            grad_norm = clip_gradients(model.parameters(), cfg.clip_norm)
            lr = warmup_lr(step + 1, model.config.model_dim, cfg.warmup_steps, cfg.lr_scale)
            optimizer.step(lr)
            elapsed_ms = (
                int(round((time.perf_counter() - started) * 1000.0))
                if cfg.log_wall_time
                else 0
            )
            row = {
                "step": step,
                "lr": lr,
                "p": p,
                "loss_total": loss_value,
                "loss_rnnt": rnnt_sum / len(batch),
                "loss_lid": lid_sum / len(batch),
                "grad_norm": grad_norm,
                "wall_ms": elapsed_ms,
            }
            result.metrics.append(row)
            if metrics_file:
                metrics_file.write(_format_row(row) + "\n")
            result.final_step = step + 1
            if (
                cfg.checkpoint_path
                and cfg.checkpoint_every > 0
                and (step + 1) % cfg.checkpoint_every == 0
            ):
                save_checkpoint(
                    model, cfg.checkpoint_path, step + 1, {"config_hash": cfg.config_hash}
                )
    finally:
        if metrics_file:
            metrics_file.close()
    if cfg.checkpoint_path:
        save_checkpoint(
            model, cfg.checkpoint_path, result.final_step, {"config_hash": cfg.config_hash}
        )
        result.checkpoint_path = cfg.checkpoint_path
    return result
