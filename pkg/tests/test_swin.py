import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptiml.swin import (GridError, PatchMerging, SwinBlock, average_prompts, expand_prompts, shift_keep_mask,
                            tokens_to_grid, window_geometry)
from promptiml.tensor import Tensor

F64 = np.float64


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def dense_block_oracle(blk, x):
    """Plain self-attention block over all tokens of x[B,H,W,C], written directly in numpy."""
    B, H, W, C = x.shape
    heads = blk.attn.heads
    hd = C // heads
    t = x.reshape(B, H * W, C)
    h = _ln(t, blk.norm1.gain.data, blk.norm1.bias.data)
    qkv = h @ blk.attn.qkv.weight.data + blk.attn.qkv.bias.data
    q, k, v = (qkv[..., i * C:(i + 1) * C].reshape(B, -1, heads, hd).transpose(0, 2, 1, 3) for i in range(3))
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, -1, C) @ blk.attn.proj.weight.data + blk.attn.proj.bias.data
    t = t + o
    m = _ln(t, blk.norm2.gain.data, blk.norm2.bias.data)
    m = _gelu(m @ blk.mlp.fc1.weight.data + blk.mlp.fc1.bias.data) @ blk.mlp.fc2.weight.data + blk.mlp.fc2.bias.data
    return (t + m).reshape(B, H, W, C)


def _block(seed, dim=8, heads=2, window=2, shifted=False):
    return SwinBlock(dim, heads, window, shifted, np.random.default_rng(seed), mlp_ratio=2, dtype=F64)


# --------------------------------------------------------- prompt replication
def test_expand_shape_and_copies():
    P = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8)))
    E = expand_prompts(P, 4).data
    assert E.shape == (8, 3, 8)
    for b in range(2):
        for w in range(4):
            assert np.array_equal(E[b * 4 + w], P.data[b])


def test_expand_average_round_trip():
    P = np.random.default_rng(1).normal(size=(2, 3, 8))
    np.testing.assert_array_equal(average_prompts(expand_prompts(Tensor(P), 4), 4).data, P)


def test_average_opposite_copies_cancel():
    v = np.random.default_rng(2).normal(size=(1, 2, 5))
    out = average_prompts(Tensor(np.concatenate([v, -v])), 2).data
    np.testing.assert_array_equal(out, 0.0)


def test_average_matches_mean_oracle():
    x = np.random.default_rng(3).normal(size=(6, 2, 4))
    out = average_prompts(Tensor(x), 3).data
    expect = np.stack([sum(x[b * 3 + w] for w in range(3)) / 3 for b in range(2)])
    assert np.max(np.abs(out - expect)) <= 1e-12


def test_average_indivisible_extent():
    with pytest.raises(ValueError):
        average_prompts(Tensor(np.zeros((5, 2, 3))), 2)


# ------------------------------------------------------------------ geometry
def test_window_geometry_clamps_and_disables_shift():
    assert window_geometry(8, 8, 4, True) == (4, 2)
    assert window_geometry(4, 4, 4, True) == (4, 0)
    assert window_geometry(2, 2, 4, True) == (2, 0)
    with pytest.raises(GridError):
        window_geometry(6, 6, 4, False)


def test_shift_mask_separates_regions_and_shows_prompts():
    keep = shift_keep_mask(8, 8, 4, 2, n_prompts=2)
    assert keep.shape == (4, 18, 18)
    assert keep[:, :2, :].all() and keep[:, :, :2].all()
    # first window holds a single region; the last mixes four
    assert keep[0].all()
    assert keep[3, 2:, 2:].sum() == 4 * 4 * 4
    assert shift_keep_mask(8, 8, 4, 0) is None


def test_tokens_to_grid():
    t = Tensor(np.arange(2 * 16 * 3.0).reshape(2, 16, 3))
    assert tokens_to_grid(t).shape == (2, 4, 4, 3)
    with pytest.raises(GridError):
        tokens_to_grid(Tensor(np.zeros((1, 7, 3))), H=3)


# -------------------------------------------------------------------- blocks
def test_zeroed_output_projections_give_identity():
    blk = _block(4)
    for lin in (blk.attn.proj, blk.mlp.fc2):
        lin.zero_()
    x = np.random.default_rng(5).normal(size=(2, 4, 4, 8))
    P = Tensor(np.random.default_rng(6).normal(size=(2, 3, 8)))
    out, _ = blk(Tensor(x), P)
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("seed", range(10))
def test_window_locality(seed):
    r = np.random.default_rng(seed)
    window = int(r.choice([2, 4]))
    H = window * int(r.integers(2, 4))
    dim = int(r.choice([4, 8]))
    blk = _block(100 + seed, dim=dim, window=window)
    x = r.normal(size=(1, H, H, dim))
    P = Tensor(r.normal(size=(1, 2, dim)))
    a, _ = blk(Tensor(x), P)
    x2 = x.copy()
    x2[:, window:2 * window, window:2 * window] = 0.0  # zero window B
    b, _ = blk(Tensor(x2), P)
    assert np.array_equal(a.data[:, :window, :window], b.data[:, :window, :window])


def test_single_window_matches_dense_attention():
    blk = _block(7, dim=8, window=4)
    x = np.random.default_rng(8).normal(size=(2, 4, 4, 8))
    out, p_out = blk(Tensor(x))
    assert p_out is None
    assert np.max(np.abs(out.data - dense_block_oracle(blk, x))) <= 1e-10


def test_zero_prompts_still_occupy_attention_slots():
    blk = _block(9)
    x = Tensor(np.random.default_rng(10).normal(size=(1, 4, 4, 8)))
    zero = Tensor(np.zeros((1, 2, 8)))
    with_p, _ = blk(x, zero)
    without, _ = blk(x)
    assert not np.allclose(with_p.data, without.data)
    # when every token carries the same value vector, extra slots cannot change the output
    blk.attn.qkv.weight.data[:, 16:] = 0.0
    with_p, _ = blk(x, zero)
    without, _ = blk(x)
    np.testing.assert_allclose(with_p.data, without.data, atol=1e-12)


def test_image_tokens_depend_on_prompts():
    blk = _block(11)
    x = Tensor(np.random.default_rng(12).normal(size=(1, 4, 4, 8)))
    r = np.random.default_rng(13)
    a, pa = blk(x, Tensor(r.normal(size=(1, 2, 8))))
    b, pb = blk(x, Tensor(r.normal(size=(1, 2, 8))))
    assert not np.allclose(a.data, b.data)
    assert pa.shape == (1, 2, 8)


def test_shifted_block_differs_from_unshifted():
    x = Tensor(np.random.default_rng(14).normal(size=(1, 8, 8, 8)))
    a, _ = _block(15, window=4, shifted=False)(x)
    b, _ = _block(15, window=4, shifted=True)(x)
    assert not np.allclose(a.data, b.data)


def test_block_rejects_bad_grid():
    with pytest.raises(GridError):
        _block(16, window=4)(Tensor(np.zeros((1, 6, 6, 8))))


def test_patch_merging_shapes():
    pm = PatchMerging(6, np.random.default_rng(17), F64)
    assert pm(Tensor(np.zeros((2, 4, 4, 6)))).shape == (2, 2, 2, 12)
    with pytest.raises(GridError):
        pm(Tensor(np.zeros((1, 3, 4, 6))))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 4), st.integers(0, 1000))
def test_round_trip_property(B, n_w, n_p, seed):
    P = np.random.default_rng(seed).normal(size=(B, n_p, 3))
    np.testing.assert_array_equal(average_prompts(expand_prompts(Tensor(P), n_w), n_w).data, P)
