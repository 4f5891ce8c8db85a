"""Finite-difference and enumeration self-checks.

Both the CLI (grad-check, oracle-check) and the acceptance tests run these
suites, so there is exactly one definition of what "verified" means. Every
check returns its worst-case error and the tolerance it must beat.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    backward,
    concat,
    cross_entropy_with_logits,
    embedding,
    grad_check,
    layer_norm,
    log_softmax,
    logsumexp,
    matmul,
    mean_,
    mul,
    no_grad,
    pairwise_sum,
    relu,
    row_scale,
    sigmoid,
    slice_axis,
    softmax,
    sum_,
    tanh,
    transpose,
)
from .data import Utterance
from .encoder import TransformerLayer, build_chunk_mask
from .experts import GateParams, MultilingualBlock, all_ones_lid, lid_loss, run_block
from .joint import JointNetwork, PredictionNetwork
from .model import Model, ModelConfig
from .seeding import substream
from .transducer import (
    enumerate_alignment_paths,
    enumerate_alignment_probability,
    forward_backward_totals,
    transducer_loss,
)

__all__ = [
    "CheckResult",
    "run_gradient_suite",
    "run_oracle_suite",
    "format_results",
]

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self):
        return math.isfinite(self.error) and self.error < self.tolerance


def format_results(results):
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{status}  {r.name:<28} err={r.error:.3e}  tol={r.tolerance:.0e}"
            f"  ({r.seconds:.2f}s)"
        )
    return "\n".join(lines)


def _randomize_params(params, rng, scale=0.4):
    """Refill parameters with generic values; zero-init layers would
    otherwise leave whole branches with structurally zero gradients."""
    for name in sorted(params):
        p = params[name]
        p.values = rng.normal(size=p.values.shape) * scale


def _param_grad_errors(params, forward, eps):
    """Worst relative error across every element of every parameter."""
    grads = backward(forward())
    worst = 0.0
    with no_grad():
        for name in sorted(params):
            p = params[name]
            analytic = grads.get(p)
            if analytic is None:
                analytic = np.zeros_like(p.values)
            aflat = analytic.reshape(-1)
            for i in range(p.values.size):
                original = p.values.flat[i]
                p.values.flat[i] = original + eps
                hi = forward().item()
                p.values.flat[i] = original - eps
                lo = forward().item()
                p.values.flat[i] = original
                numeric = (hi - lo) / (2.0 * eps)
                err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
                worst = max(worst, err)
    return worst


def _gradient_checks(seed, eps):
    def rng(*tags):
        return substream(seed, "gradcheck", *tags)

    def weighted(x, d):
        return sum_(mul(x, Tensor(d)))

    checks = []

    def primitive(name, make):
        checks.append((name, make))

    r = rng

    primitive("add", lambda: grad_check(
        lambda t: weighted(add(t, Tensor(r("add", "c").normal(size=(4,)))),
                           r("add", "d").normal(size=(3, 4))),
        Tensor(r("add", "x").normal(size=(3, 4))), eps))
    primitive("mul", lambda: grad_check(
        lambda t: weighted(mul(t, Tensor(r("mul", "c").normal(size=(4,)))),
                           r("mul", "d").normal(size=(3, 4))),
        Tensor(r("mul", "x").normal(size=(3, 4))), eps))
    primitive("mul-rowvec", lambda: grad_check(
        lambda t: weighted(mul(Tensor(r("mulr", "c").normal(size=(3, 4))), t),
                           r("mulr", "d").normal(size=(3, 4))),
        Tensor(r("mulr", "x").normal(size=(4,))), eps))
    primitive("matmul-left", lambda: grad_check(
        lambda t: weighted(matmul(t, Tensor(r("mml", "c").normal(size=(4, 2)))),
                           r("mml", "d").normal(size=(3, 2))),
        Tensor(r("mml", "x").normal(size=(3, 4))), eps))
    primitive("matmul-right", lambda: grad_check(
        lambda t: weighted(matmul(Tensor(r("mmr", "c").normal(size=(2, 3))), t),
                           r("mmr", "d").normal(size=(2, 4))),
        Tensor(r("mmr", "x").normal(size=(3, 4))), eps))
    primitive("transpose", lambda: grad_check(
        lambda t: weighted(transpose(t), r("tr", "d").normal(size=(4, 3))),
        Tensor(r("tr", "x").normal(size=(3, 4))), eps))
    primitive("tanh", lambda: grad_check(
        lambda t: weighted(tanh(t), r("tanh", "d").normal(size=(3, 4))),
        Tensor(r("tanh", "x").normal(size=(3, 4))), eps))
    primitive("sigmoid", lambda: grad_check(
        lambda t: weighted(sigmoid(t), r("sig", "d").normal(size=(3, 4))),
        Tensor(r("sig", "x").normal(size=(3, 4))), eps))

    def relu_input():
        g = r("relu", "x")
        signs = np.where(g.random(size=(3, 4)) < 0.5, -1.0, 1.0)
        return Tensor(g.uniform(0.1, 1.0, size=(3, 4)) * signs)

    primitive("relu", lambda: grad_check(
        lambda t: weighted(relu(t), r("relu", "d").normal(size=(3, 4))),
        relu_input(), eps))
    primitive("softmax", lambda: grad_check(
        lambda t: weighted(softmax(t, axis=-1), r("sm", "d").normal(size=(3, 4))),
        Tensor(r("sm", "x").normal(size=(3, 4))), eps))

    mask_pattern = np.array(
        [[1, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]], dtype=bool
    )
    primitive("softmax-masked", lambda: grad_check(
        lambda t: weighted(softmax(t, axis=-1, mask=mask_pattern),
                           r("smm", "d").normal(size=(3, 4))),
        Tensor(r("smm", "x").normal(size=(3, 4))), eps))
    primitive("log-softmax", lambda: grad_check(
        lambda t: weighted(log_softmax(t), r("lsm", "d").normal(size=(3, 4))),
        Tensor(r("lsm", "x").normal(size=(3, 4))), eps))
    primitive("logsumexp", lambda: grad_check(
        lambda t: weighted(logsumexp(t, axis=-1), r("lse", "d").normal(size=(3,))),
        Tensor(r("lse", "x").normal(size=(3, 4))), eps))
    primitive("layer-norm", lambda: grad_check(
        lambda t: weighted(layer_norm(t), r("ln", "d").normal(size=(3, 4))),
        Tensor(r("ln", "x").normal(size=(3, 4))), eps))
    primitive("embedding", lambda: grad_check(
        lambda t: weighted(embedding(t, [0, 2, 4, 2, 1]),
                           r("emb", "d").normal(size=(5, 3))),
        Tensor(r("emb", "x").normal(size=(5, 3))), eps))
    primitive("concat", lambda: grad_check(
        lambda t: weighted(concat([t, Tensor(r("cat", "c").normal(size=(2, 4)))], axis=0),
                           r("cat", "d").normal(size=(5, 4))),
        Tensor(r("cat", "x").normal(size=(3, 4))), eps))
    primitive("slice", lambda: grad_check(
        lambda t: weighted(slice_axis(t, 1, 3, axis=1),
                           r("sl", "d").normal(size=(3, 2))),
        Tensor(r("sl", "x").normal(size=(3, 4))), eps))
    primitive("sum", lambda: grad_check(
        lambda t: sum_(t), Tensor(r("sum", "x").normal(size=(3, 4))), eps))
    primitive("mean", lambda: grad_check(
        lambda t: weighted(mean_(t, axis=0), r("mean", "d").normal(size=(4,))),
        Tensor(r("mean", "x").normal(size=(3, 4))), eps))
    primitive("cross-entropy", lambda: grad_check(
        lambda t: cross_entropy_with_logits(t, [1, 3, 0]),
        Tensor(r("ce", "x").normal(size=(3, 4))), eps))
    primitive("row-scale-rows", lambda: grad_check(
        lambda t: weighted(row_scale(t, Tensor(r("rs", "w").normal(size=(3,)))),
                           r("rs", "d").normal(size=(3, 4))),
        Tensor(r("rs", "x").normal(size=(3, 4))), eps))
    primitive("row-scale-weights", lambda: grad_check(
        lambda t: weighted(row_scale(Tensor(r("rsw", "a").normal(size=(3, 4))), t),
                           r("rsw", "d").normal(size=(3, 4))),
        Tensor(r("rsw", "x").normal(size=(3,))), eps))
    primitive("pairwise-sum-left", lambda: grad_check(
        lambda t: weighted(pairwise_sum(t, Tensor(r("pw", "b").normal(size=(2, 4)))),
                           r("pw", "d").normal(size=(6, 4))),
        Tensor(r("pw", "x").normal(size=(3, 4))), eps))
    primitive("pairwise-sum-right", lambda: grad_check(
        lambda t: weighted(pairwise_sum(Tensor(r("pwr", "a").normal(size=(3, 4))), t),
                           r("pwr", "d").normal(size=(6, 4))),
        Tensor(r("pwr", "x").normal(size=(2, 4))), eps))

    def check_transformer_layer():
        layer = TransformerLayer(4, 2, 8, rng("layer", "init"))
        _randomize_params(dict(layer.named_parameters()), rng("layer", "rand"))
        mask = build_chunk_mask(3, 2, 1)
        d = rng("layer", "d").normal(size=(3, 4))
        return grad_check(
            lambda t: weighted(layer.forward(t, mask), d),
            Tensor(rng("layer", "x").normal(size=(3, 4))), eps)

    def check_transformer_layer_params():
        layer = TransformerLayer(4, 2, 8, rng("layerp", "init"))
        params = dict(layer.named_parameters())
        _randomize_params(params, rng("layerp", "rand"))
        mask = build_chunk_mask(3, 2, 1)
        x = Tensor(rng("layerp", "x").normal(size=(3, 4)))
        d = rng("layerp", "d").normal(size=(3, 4))
        return _param_grad_errors(params, lambda: weighted(layer.forward(x, mask), d), eps)

    def check_gated_block():
        stacks = [
            [TransformerLayer(4, 2, 8, rng("block", f"expert{i}"))] for i in range(2)
        ]
        shared = [TransformerLayer(4, 2, 8, rng("block", "shared"))]
        gate = GateParams(2, 4, 4, rng("block", "gate"))
        block = MultilingualBlock(stacks, gate, shared)
        params = dict(block.named_parameters())
        _randomize_params(params, rng("block", "rand"))
        mask = build_chunk_mask(3, 2, 1)
        x = Tensor(rng("block", "x").normal(size=(3, 4)))
        d = rng("block", "d").normal(size=(3, 4))
        lid = all_ones_lid(2)

        def forward():
            out, logits = run_block(x, lid, block, mask)
            return weighted(out, d) + lid_loss([logits], 0)

        return _param_grad_errors(params, forward, eps)

    def check_joint_experts():
        joint = JointNetwork(
            4, 4, 4, 5, 2, True, lambda name: rng("joint", name)
        )
        params = dict(joint.named_parameters())
        _randomize_params(params, rng("joint", "rand"))
        enc = Tensor(rng("joint", "enc").normal(size=(3, 4)))
        pred = Tensor(rng("joint", "pred").normal(size=(2, 4)))
        lid = all_ones_lid(2)
        d = rng("joint", "d").normal(size=(6, 5))

        def forward():
            hidden = joint.hidden(enc, pred, lid)
            return weighted(joint.output_logits(hidden), d)

        return _param_grad_errors(params, forward, eps)

    def check_prediction_net():
        pred = PredictionNetwork(5, 4, 2, lambda name: rng("pred", name))
        params = dict(pred.named_parameters())
        _randomize_params(params, rng("pred", "rand"))
        d = rng("pred", "d").normal(size=(4, 4))
        return _param_grad_errors(
            params, lambda: weighted(pred.forward_sequence([1, 3, 2]), d), eps
        )

    def check_transducer():
        targets = [1, 3]
        x = Tensor(rng("rnnt", "x").normal(size=(9, 4)))
        return grad_check(
            lambda t: transducer_loss(log_softmax(t), targets, frames=3), x, eps
        )

    def check_full_model():
        config = ModelConfig(
            n_languages=2,
            feature_dim=3,
            vocab_size=5,
            model_dim=4,
            heads=2,
            ffn_dim=8,
            chunk_size=2,
            left_chunks=1,
            downsample_factor=2,
            shared_bottom_depth=1,
            n_blocks=1,
            expert_depth=1,
            shared_depth=0,
            prediction_depth=1,
            prediction_dim=4,
            joint_dim=4,
            lid_weight=0.3,
            variant="gated-expert",
            use_joint_experts=True,
        )
        model = Model(config, seed=7)
        params = model.parameters()
        _randomize_params(params, rng("model", "rand"), scale=0.3)
        utt = Utterance(
            features=rng("model", "feat").normal(size=(6, 3)),
            tokens=np.array([1, 4]),
            lid=0,
        )
        lid = all_ones_lid(2)
        return _param_grad_errors(
            params, lambda: model.forward_loss(utt, lid)[0], eps
        )

    checks.append(("transformer-layer-input", check_transformer_layer))
    checks.append(("transformer-layer-params", check_transformer_layer_params))
    checks.append(("gated-block", check_gated_block))
    checks.append(("joint-experts", check_joint_experts))
    checks.append(("prediction-net", check_prediction_net))
    checks.append(("transducer-loss", check_transducer))
    checks.append(("full-model", check_full_model))
    return checks


def run_gradient_suite(seed=0, eps=1e-5, tol=GRAD_TOL):
    """Finite-difference checks for every primitive and composite layer."""
    results = []
    for name, runner in _gradient_checks(seed, eps):
        started = time.perf_counter()
        error = float(runner())
        results.append(CheckResult(name, error, tol, time.perf_counter() - started))
    return results


def _random_lattice(rng, max_t=4, max_u=3, max_v=4):
    t_frames = int(rng.integers(1, max_t + 1))
    u_labels = int(rng.integers(1, max_u + 1))
    vocab = int(rng.integers(2, max_v + 1))
    logits = rng.normal(size=(t_frames * (u_labels + 1), vocab))
    with no_grad():
        log_probs = log_softmax(Tensor(logits)).values
    targets = rng.integers(1, vocab, size=u_labels)
    return log_probs, targets, t_frames


def run_oracle_suite(seed=0, cases=120, tol=ORACLE_TOL):
    """Transducer DP versus brute-force enumeration, plus frozen examples."""
    results = []

    started = time.perf_counter()
    uniform = np.full((2 * 2, 2), math.log(0.5))
    loss = transducer_loss(uniform, [1], frames=2).item()
    err = abs(loss - 0.9808292530117262)
    paths = enumerate_alignment_paths(uniform, [1], frames=2)
    err = max(err, abs(len(paths) - 3))
    results.append(
        CheckResult("worked-lattice", err, 1e-12, time.perf_counter() - started)
    )

    started = time.perf_counter()
    three_by_two = np.full((3 * 3, 3), -math.log(3.0))
    count = len(enumerate_alignment_paths(three_by_two, [1, 2], frames=3))
    results.append(
        CheckResult(
            "path-count-10", float(abs(count - 10)), 0.5, time.perf_counter() - started
        )
    )

    rng = substream(seed, "oracle")
    worst_delta = 0.0
    worst_fb = 0.0
    worst_gradsum = 0.0
    started = time.perf_counter()
    for _ in range(cases):
        log_probs, targets, frames = _random_lattice(rng)
        loss = transducer_loss(log_probs, targets, frames=frames).item()
        oracle = enumerate_alignment_probability(log_probs, targets, frames=frames)
        worst_delta = max(worst_delta, abs(-loss - oracle))
        fwd, bwd = forward_backward_totals(log_probs, targets, frames=frames)
        worst_fb = max(worst_fb, abs(fwd - bwd))
        lattice = Tensor(log_probs, requires_grad=True)
        grads = backward(transducer_loss(lattice, targets, frames=frames))
        moves = frames + len(targets)
        worst_gradsum = max(worst_gradsum, abs(float(grads[lattice].sum()) + moves))
    elapsed = time.perf_counter() - started
    results.append(CheckResult("enumeration-vs-dp", worst_delta, tol, elapsed))
    results.append(CheckResult("forward-backward-agree", worst_fb, 1e-9, 0.0))
    results.append(CheckResult("grad-occupancy-sum", worst_gradsum, 1e-9, 0.0))
    return results
