import numpy as np
import pytest

import gated_transducer.autodiff as ad
from gated_transducer.autodiff import ContractError, Tensor, backward
from gated_transducer.encoder import TransformerLayer, build_chunk_mask
from gated_transducer.experts import (
    GateParams,
    MultilingualBlock,
    all_ones_lid,
    combine_experts,
    gate_logits,
    lid_loss,
    one_hot_lid,
    run_block,
    validate_lid,
)
from gated_transducer.seeding import substream

DIM = 8


def make_block(n_languages, seed=0, expert_depth=1, shared_depth=1):
    rng = substream(seed, "block")
    stacks = []
    for i in range(n_languages):
        stack = [
            TransformerLayer(DIM, 2, 16, substream(seed, "expert", i, d))
            for d in range(expert_depth)
        ]
        stacks.append(stack)
    gate = GateParams(n_languages, DIM, DIM, rng)
    shared = [
        TransformerLayer(DIM, 2, 16, substream(seed, "shared", d))
        for d in range(shared_depth)
    ]
    return MultilingualBlock(stacks, gate, shared)


def randomize(block, seed=5):
    rng = np.random.default_rng(seed)
    for _, p in sorted(block.named_parameters()):
        p.values = rng.normal(0, 0.3, size=p.values.shape)


def test_lid_validation():
    np.testing.assert_array_equal(validate_lid([1, 0], 2), [1, 0])
    with pytest.raises(ContractError):
        validate_lid([0, 0], 2)
    with pytest.raises(ContractError):
        validate_lid([1, 2], 2)
    with pytest.raises(ContractError):
        validate_lid([1, 0, 0], 2)
    np.testing.assert_array_equal(one_hot_lid(1, 3), [0, 1, 0])
    np.testing.assert_array_equal(all_ones_lid(2), [1, 1])


def test_gate_logits_shape_and_masked_sum():
    block = make_block(3)
    randomize(block)
    rng = np.random.default_rng(0)
    outs = [Tensor(rng.normal(size=(4, DIM))) for _ in range(3)]
    logits = gate_logits(outs, all_ones_lid(3), block.gate)
    assert logits.shape == (4, 3)
    # with every language active, the formula is the plain ungated sum
    manual = ad.tanh(
        outs[0] @ block.gate.w_in[0]
        + outs[1] @ block.gate.w_in[1]
        + outs[2] @ block.gate.w_in[2]
    ) @ block.gate.w_out
    np.testing.assert_array_equal(logits.values, manual.values)


def test_gate_logits_requires_active_outputs():
    block = make_block(2)
    outs = [None, Tensor(np.zeros((3, DIM)))]
    with pytest.raises(ContractError):
        gate_logits(outs, [1, 1], block.gate)
    # inactive language may be missing
    logits = gate_logits(outs, [0, 1], block.gate)
    assert logits.shape == (3, 2)


def test_combine_weights_sum_to_one_over_active():
    rng = np.random.default_rng(2)
    outs = [Tensor(rng.normal(size=(5, DIM))) for _ in range(3)]
    logits = Tensor(rng.normal(size=(5, 3)))
    combined, weights = combine_experts(outs, logits, [1, 0, 1])
    np.testing.assert_allclose(weights.values.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(weights.values[:, 1] == 0.0)
    manual = (
        outs[0].values * weights.values[:, 0:1] + outs[2].values * weights.values[:, 2:3]
    )
    np.testing.assert_allclose(combined.values, manual, atol=1e-15)


def test_one_hot_combination_is_selection():
    rng = np.random.default_rng(3)
    outs = [Tensor(rng.normal(size=(4, DIM))), Tensor(rng.normal(size=(4, DIM)))]
    logits = Tensor(rng.normal(size=(4, 2)))
    combined, weights = combine_experts(outs, logits, one_hot_lid(1, 2))
    np.testing.assert_array_equal(combined.values, outs[1].values)
    np.testing.assert_array_equal(weights.values[:, 1], 1.0)


def test_inactive_expert_gets_no_gradient():
    block = make_block(2)
    randomize(block)
    x = Tensor(np.random.default_rng(4).normal(size=(4, DIM)))
    mask = build_chunk_mask(4, 2, 4)
    out, logits = run_block(x, one_hot_lid(0, 2), block, mask)
    backward(ad.sum_(out) + ad.sum_(logits))
    active = dict(block.expert_stacks[0][0].named_parameters())
    inactive = dict(block.expert_stacks[1][0].named_parameters())
    assert any(p.grad is not None and np.any(p.grad != 0) for p in active.values())
    assert all(p.grad is None for p in inactive.values())
    # the inactive input projection of the gate is untouched too
    assert block.gate.w_in[1].grad is None
    assert block.gate.w_out.grad is not None


def test_run_block_all_ones_uses_every_expert():
    block = make_block(2, shared_depth=0)
    randomize(block)
    x = Tensor(np.random.default_rng(5).normal(size=(3, DIM)))
    mask = build_chunk_mask(3, 2, 4)
    out, logits = run_block(x, all_ones_lid(2), block, mask)
    backward(ad.sum_(out))
    for stack in block.expert_stacks:
        grads = [p.grad for _, p in stack[0].named_parameters()]
        assert any(g is not None and np.any(g != 0) for g in grads)


def test_lid_loss_sums_blocks_and_averages_frames():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(4, 2)))
    b = Tensor(rng.normal(size=(4, 2)))
    loss = lid_loss([a, b], true_language=1)
    summed = a.values + b.values
    lp = summed - np.log(np.exp(summed).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(loss.item(), -lp[:, 1].mean(), atol=1e-12)


def test_lid_loss_pooled_uses_frame_mean():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(5, 3)))
    loss = lid_loss([a], true_language=0, pooled=True)
    pooled = a.values.mean(axis=0, keepdims=True)
    lp = pooled - np.log(np.exp(pooled).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(loss.item(), -lp[0, 0], atol=1e-12)


def test_block_stack_count_must_match_gate():
    with pytest.raises(ContractError):
        gate = GateParams(3, DIM, DIM, substream(0, "gate"))
        MultilingualBlock([[], []], gate, [])
