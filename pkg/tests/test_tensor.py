import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptiml.tensor import (Tensor, bilinear_sample, check_leaves, concat, conv2d, finite_diff_check, layer_norm,
                              no_grad, pad2d_edge, resize_bilinear, roll, softmax, split, stack)
from promptiml.tensor import kernels

from oracles import bilinear_oracle, conv_oracle, layer_norm_oracle


# ------------------------------------------------------------------ basics
def test_square_grad():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_independent_input_gets_zero_or_no_grad():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(5.0), requires_grad=True)
    (y * 3.0).backward()
    assert x.grad is None or x.grad == 0.0


def test_fan_out_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_broadcast_grad_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, [3.0, 3.0, 3.0, 3.0])
    np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_deterministic_backward():
    r = np.random.default_rng(0)
    xd, wd = r.normal(size=(2, 3, 6, 6)), r.normal(size=(4, 3, 3, 3))

    def run():
        x, w = Tensor(xd.copy(), requires_grad=True), Tensor(wd.copy(), requires_grad=True)
        conv2d(x, w, padding=1).tanh().sum().backward()
        return x.grad, w.grad

    g1, g2 = run(), run()
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_structural_ops_grads():
    r = np.random.default_rng(1)
    x = Tensor(r.normal(size=(2, 3, 4)), requires_grad=True)
    w = r.normal(size=(2, 3, 4))

    def f(t):
        a, b = split(t, 2, axis=-1)
        c = concat([b, a], axis=-1) + roll(t, (1, -1), (1, 2))
        return (stack([c, t], 0).swapaxes(1, 3)[1] * w.swapaxes(0, 2)).sum() + (t[:, 1:, ::2] ** 2).sum()

    assert finite_diff_check(f, x, eps=1e-5) <= 1e-8


# --------------------------------------------------------- finite diffs
def test_finite_diff_linear_exact():
    r = np.random.default_rng(2)
    c = r.normal(size=7)
    x = Tensor(r.normal(size=7), requires_grad=True)
    assert finite_diff_check(lambda t: (t * c).sum(), x, eps=1e-5) <= 1e-10


def test_finite_diff_quadratic():
    r = np.random.default_rng(3)
    x = Tensor(r.normal(size=7), requires_grad=True)
    assert finite_diff_check(lambda t: (t * t * 1.5 + t).sum(), x, eps=1e-5) <= 1e-8


def test_finite_diff_flags_wrong_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad(t):
        out = Tensor._make(t.data ** 2, (t,), lambda g: (g * 3 * t.data,))
        return out.sum()

    assert finite_diff_check(bad, x) > 0.1


def test_composite_conv_norm_softmax_sum():
    r = np.random.default_rng(4)
    x = Tensor(r.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 2, 3, 3)), requires_grad=True)
    g, b = Tensor(r.normal(size=3), requires_grad=True), Tensor(r.normal(size=3), requires_grad=True)
    ro = r.normal(size=(1, 5, 5, 3))

    def loss():
        h = conv2d(x, w, padding=1).transpose(0, 2, 3, 1)
        return (softmax(layer_norm(h, g, b)) * ro).sum()

    assert check_leaves(loss, [x, w, g, b], eps=1e-5) <= 1e-4


# ------------------------------------------------------------------ conv2d
def test_conv_identity_kernel():
    x = np.random.default_rng(5).normal(size=(2, 1, 4, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_box_filter_preserves_constant():
    out = conv2d(Tensor(np.full((1, 1, 6, 6), 2.5)), Tensor(np.full((1, 1, 3, 3), 1 / 9)))
    np.testing.assert_allclose(out.data, 2.5, atol=1e-14)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_nested_loops(stride, pad):
    r = np.random.default_rng(6 + stride + pad)
    x, w, b = r.normal(size=(1, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    assert np.max(np.abs(out - conv_oracle(x, w, b, stride, pad))) <= 1e-12


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channels"):
        conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_pad_edge_replicates_border():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    out = pad2d_edge(Tensor(x), 2).data
    np.testing.assert_array_equal(out[0, 0], np.pad(x[0, 0], 2, mode="edge"))


# --------------------------------------------------------------- softmax
def test_softmax_singleton_and_pair():
    np.testing.assert_array_equal(softmax(Tensor(np.array([5.0]))).data, [1.0])
    np.testing.assert_array_equal(softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])


def test_softmax_shift_invariance():
    x = np.random.default_rng(7).normal(size=(4, 6))
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + 123.4)).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_softmax_matches_definition():
    x = np.random.default_rng(8).normal(size=(5, 4))
    expect = [[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in x]
    assert np.max(np.abs(softmax(Tensor(x)).data - expect)) <= 1e-10


def test_softmax_mask_gives_exact_zeros():
    x = Tensor(np.random.default_rng(9).normal(size=(3, 5)))
    mask = np.array([[1, 0, 1, 0, 0], [0, 0, 0, 0, 1], [1, 1, 1, 1, 1]], dtype=bool)
    out = softmax(x, mask=mask).data
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-15)
    assert out[1, 4] == 1.0


def test_softmax_large_values_stay_finite():
    out = softmax(Tensor(np.array([1000.0, 999.0, -1000.0]))).data
    assert np.all(np.isfinite(out))


# ------------------------------------------------------------ layer norm
def test_layer_norm_zero_mean():
    out = layer_norm(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert abs(out.mean()) <= 1e-9


def test_layer_norm_constant_row():
    out = layer_norm(Tensor(np.full(4, 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(out, 0.0)


def test_layer_norm_matches_scalar_oracle():
    r = np.random.default_rng(10)
    x, g, b = r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)
    out = layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
    expect = np.array([layer_norm_oracle(list(row), g, b, 1e-5) for row in x])
    assert np.max(np.abs(out - expect)) <= 1e-10


# -------------------------------------------------------------- bilinear
def test_bilinear_integer_point():
    m = np.random.default_rng(11).normal(size=(2, 5, 6))
    out = bilinear_sample(Tensor(m), np.array([[2.0, 3.0]])).data
    np.testing.assert_array_equal(out[0], m[:, 3, 2])


def test_bilinear_midpoint():
    m = np.zeros((1, 2, 2))
    m[0, 0, 1] = 10.0
    assert bilinear_sample(Tensor(m), np.array([[0.5, 0.0]])).data[0, 0] == pytest.approx(5.0)


def test_bilinear_matches_four_neighbour_oracle():
    r = np.random.default_rng(12)
    m = r.normal(size=(3, 6, 7))
    pts = r.uniform(-1.5, 7.5, size=(40, 2))
    out = bilinear_sample(Tensor(m), pts).data
    expect = np.stack([bilinear_oracle(m, x, y) for x, y in pts])
    assert np.max(np.abs(out - expect)) <= 1e-12


def test_bilinear_far_outside_is_zero():
    out = bilinear_sample(Tensor(np.ones((2, 3, 3))), np.array([[-5.0, 1.0], [1.0, 10.0]])).data
    np.testing.assert_array_equal(out, 0.0)


def test_resize_identity_and_constant():
    x = np.random.default_rng(13).normal(size=(1, 4, 5, 2))
    np.testing.assert_allclose(resize_bilinear(Tensor(x), 4, 5).data, x, atol=1e-15)
    c = resize_bilinear(Tensor(np.full((1, 3, 3, 1), 4.0)), 7, 5).data
    np.testing.assert_allclose(c, 4.0, atol=1e-14)


# --------------------------------------------------------------- backends
def test_backends_agree():
    backends = kernels.available_backends()
    if len(backends) < 2:
        pytest.skip("compiled extension not built")
    r = np.random.default_rng(14)
    v = r.normal(size=(2, 5, 6, 3))
    p = r.uniform(-1, 7, size=(2, 30, 2))
    g = r.normal(size=(2, 30, 3))
    d = r.normal(size=(2, 4, 4, 3, 3, 3))
    a, b = backends["numpy"], backends["cython"]
    np.testing.assert_allclose(a.bilinear_gather(v, p), b.bilinear_gather(v, p), atol=1e-13)
    for x, y in zip(a.bilinear_scatter(g, v, p), b.bilinear_scatter(g, v, p)):
        np.testing.assert_allclose(x, y, atol=1e-13)
    np.testing.assert_allclose(a.col2im(d, 8, 8, 2, 1), b.col2im(d, 8, 8, 2, 1), atol=1e-13)


# -------------------------------------------------------------- properties
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 10
    out = softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(0, 2))
def test_conv_output_shape(seed, stride, pad):
    r = np.random.default_rng(seed)
    H, W, k = r.integers(3, 8), r.integers(3, 8), int(r.choice([1, 3]))
    out = conv2d(Tensor(r.normal(size=(1, 2, H, W))), Tensor(r.normal(size=(3, 2, k, k))), stride=stride,
                 padding=pad)
    assert out.shape == (1, 3, (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_bilinear_partition_of_unity(seed):
    # sampling an all-ones map inside the grid gives exactly 1
    r = np.random.default_rng(seed)
    pts = r.uniform(0, 4, size=(10, 2))
    out = bilinear_sample(Tensor(np.ones((1, 5, 5))), pts).data
    np.testing.assert_allclose(out, 1.0, atol=1e-14)
