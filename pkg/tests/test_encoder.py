import numpy as np
import pytest

from gated_transducer.autodiff import ContractError, Tensor
from gated_transducer.encoder import (
    Frontend,
    TransformerLayer,
    build_chunk_mask,
    sinusoidal_positions,
    stack_frames,
)
from gated_transducer.seeding import substream


def test_chunk_mask_geometry():
    mask = build_chunk_mask(8, chunk_size=3, left_chunks=1)
    # frame 4 sits in chunk 1: sees chunks 0..1, i.e. frames 0..5
    np.testing.assert_array_equal(mask[4], [1, 1, 1, 1, 1, 1, 0, 0])
    # frame 7 sits in chunk 2 with one left chunk: frames 3..8
    np.testing.assert_array_equal(mask[7], [0, 0, 0, 1, 1, 1, 1, 1])


def test_chunk_mask_never_sees_future():
    mask = build_chunk_mask(13, chunk_size=4, left_chunks=9)
    for t in range(13):
        future_chunk_start = (t // 4 + 1) * 4
        assert not mask[t, future_chunk_start:].any()
        # within the current chunk, lookahead is allowed
        assert mask[t, : t + 1].all() or t // 4 > 9


def test_chunk_mask_zero_left_context():
    mask = build_chunk_mask(6, chunk_size=2, left_chunks=0)
    np.testing.assert_array_equal(mask[3], [0, 0, 1, 1, 0, 0])


def test_stack_frames_pads_tail():
    x = np.arange(10.0).reshape(5, 2)
    out = stack_frames(x, 2)
    assert out.shape == (3, 4)
    np.testing.assert_allclose(out[0], [0, 1, 2, 3])
    np.testing.assert_allclose(out[2], [8, 9, 0, 0])


def test_stack_frames_identity_factor():
    x = np.ones((4, 3))
    np.testing.assert_allclose(stack_frames(x, 1), x)


def test_sinusoidal_positions_alternate():
    table = sinusoidal_positions(6, 8)
    assert table.shape == (6, 8)
    np.testing.assert_allclose(table[0, 0::2], 0.0, atol=1e-12)
    np.testing.assert_allclose(table[0, 1::2], 1.0, atol=1e-12)
    assert np.all(np.abs(table) <= 1.0)


def test_fresh_layer_is_identity():
    layer = TransformerLayer(8, 2, 16, substream(0, "layer"))
    x = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
    mask = build_chunk_mask(5, 2, 1)
    out = layer.forward(x, mask)
    np.testing.assert_array_equal(out.values, x.values)


def test_layer_output_causal_under_mask():
    rng = np.random.default_rng(1)
    layer = TransformerLayer(8, 2, 16, substream(3, "layer"))
    # break the identity start so attention actually mixes frames
    layer.wo.values = rng.normal(size=(8, 8)) * 0.3
    layer.ffn_w2.values = rng.normal(size=layer.ffn_w2.shape) * 0.3
    x = rng.normal(size=(9, 8))
    mask = build_chunk_mask(9, 3, 1)
    base = layer.forward(Tensor(x), mask).values
    bumped = x.copy()
    bumped[6:] += 10.0  # last chunk only
    out = layer.forward(Tensor(bumped), mask).values
    np.testing.assert_array_equal(out[:6], base[:6])
    assert np.any(out[6:] != base[6:])


def test_layer_rejects_bad_head_split():
    with pytest.raises(ContractError):
        TransformerLayer(10, 3, 16, substream(0, "layer"))


def test_frontend_projects_stacked_width():
    f = Frontend(3, 2, 8, substream(0, "front"))
    out = f.project(np.ones((5, 3)))
    assert out.shape == (3, 8)
    with pytest.raises(Exception):
        f.project(np.ones((5, 4)))


def test_layer_param_names_unique():
    layer = TransformerLayer(8, 2, 16, substream(0, "layer"))
    names = [n for n, _ in layer.named_parameters("enc.")]
    assert len(names) == len(set(names))
    assert all(n.startswith("enc.") for n in names)
