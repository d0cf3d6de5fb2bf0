"""Fused differentiable kernels: convolution, normalization, softmax, sampling."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from promptiml.tensor import kernels
from promptiml.tensor.core import Tensor, _unbroadcast


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,k,k]`` (zero padding)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, kernel expects {Cw}")
    if kh != kw:
        raise ValueError(f"conv2d needs square kernels, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = kh
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (N, C, Ho, Wo, k, k) strided view
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, K)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
            gx = kernels.col2im(dcols, H, W, stride, padding)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return Tensor._make(out, parents, bw)


def pad2d_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the last two axes of ``x`` by ``p`` on every side."""
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, width, mode="edge")

    def bw(g):
        rows = g[..., p:-p, :].copy()
        rows[..., 0, :] += g[..., :p, :].sum(-2)
        rows[..., -1, :] += g[..., -p:, :].sum(-2)
        gx = rows[..., p:-p].copy()
        gx[..., 0] += rows[..., :p].sum(-1)
        gx[..., -1] += rows[..., -p:].sum(-1)
        return (gx,)

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine params must have shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True))
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), bw)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax.  ``mask`` (broadcastable, True = keep) zeroes excluded slots exactly."""
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw)


def sample_nhwc(value: Tensor, points: Tensor) -> Tensor:
    """Bilinear reads of ``value[N,H,W,C]`` at ``points[N,P,2]`` (x, y); zero outside."""
    if value.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2 or points.shape[0] != value.shape[0]:
        raise ValueError(f"sample_nhwc shapes incompatible: value {value.shape}, points {points.shape}")
    out = kernels.bilinear_gather(value.data, points.data)

    def bw(g):
        gv, gp = kernels.bilinear_scatter(g, value.data, points.data)
        return gv, gp

    return Tensor._make(out, (value, points), bw)


def bilinear_sample(fmap: Tensor, points) -> Tensor:
    """Sample ``fmap[C,H,W]`` at a list of ``(x, y)`` points; returns ``[P, C]``.

    ``x`` indexes columns and ``y`` rows, so the integer point ``(2, 3)``
    reads ``fmap[:, 3, 2]``.
    """
    if not isinstance(points, Tensor):
        points = Tensor(np.asarray(points, dtype=fmap.dtype).reshape(-1, 2))
    v = fmap.transpose(1, 2, 0).reshape(1, *fmap.shape[1:], fmap.shape[0])
    return sample_nhwc(v, points.reshape(1, -1, 2)).reshape(-1, fmap.shape[0])


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape ``(n_out, n_in)``."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        A[o, i0] += 1 - f
        A[o, i1] += f
    return A


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resize the spatial axes of a channels-last ``[B,H,W,C]`` tensor."""
    B, H, W, C = x.shape
    Ah = interp_matrix(H, out_h, x.dtype)
    Aw = interp_matrix(W, out_w, x.dtype)
    out = np.einsum("oh,bhwc->bowc", Ah, x.data)
    out = np.einsum("pw,bowc->bopc", Aw, out)

    def bw(g):
        gx = np.einsum("pw,bopc->bowc", Aw, g)
        return (np.einsum("oh,bowc->bhwc", Ah, gx),)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as ``[in, out]``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1]) @ w
    if b is not None:
        y = y + b
    return y.reshape(*lead, w.shape[1])
