"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ext`` module; used when the
extension is not built or ``PROMPTIML_PURE_PYTHON=1`` is set.

Conventions: maps are channels-last ``(N, H, W, C)``; points are ``(N, P, 2)``
holding ``(x, y)`` pixel coordinates with ``x`` the column.  Reads outside the
map return zero.
"""

import numpy as np

# (dx, dy) of the four bilinear neighbours, in a fixed order
_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def _corner_terms(points, H, W):
    x = points[..., 0]
    y = points[..., 1]
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    for dx, dy in _CORNERS:
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(valid, yi * W + xi, 0)
        w = wx[dx] * wy[dy] * valid
        # d w / d x and d w / d y for this corner
        dwx = (2 * dx - 1) * wy[dy] * valid
        dwy = (2 * dy - 1) * wx[dx] * valid
        yield idx, w, dwx, dwy


def bilinear_gather(value, points):
    N, H, W, C = value.shape
    flat = value.reshape(N, H * W, C)
    out = np.zeros((N, points.shape[1], C), dtype=value.dtype)
    for idx, w, _, _ in _corner_terms(points, H, W):
        out += w[..., None] * np.take_along_axis(flat, idx[..., None], axis=1)
    return out


def bilinear_scatter(grad, value, points):
    """Gradients of ``bilinear_gather`` w.r.t. ``value`` and ``points``."""
    N, H, W, C = value.shape
    flat = value.reshape(N, H * W, C)
    gflat = np.zeros((N * H * W, C), dtype=value.dtype)
    gpts = np.zeros(points.shape, dtype=value.dtype)
    base = (np.arange(N, dtype=np.intp) * (H * W))[:, None]
    for idx, w, dwx, dwy in _corner_terms(points, H, W):
        np.add.at(gflat, (idx + base).reshape(-1), (grad * w[..., None]).reshape(-1, C))
        dot = (grad * np.take_along_axis(flat, idx[..., None], axis=1)).sum(-1)
        gpts[..., 0] += dwx * dot
        gpts[..., 1] += dwy * dot
    return gflat.reshape(N, H, W, C), gpts


def col2im(dcols, H, W, stride, pad):
    """Fold ``(N, Ho, Wo, C, k, k)`` patch gradients back onto an ``(N, C, H, W)`` image."""
    N, Ho, Wo, C, k, _ = dcols.shape
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    d = dcols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d[:, :, i, j]
    return out[:, :, pad:pad + H, pad:pad + W]
