"""Brute-force reference implementations used by the unit and acceptance tests.

Each oracle is written from the definition with explicit loops so that it
shares no code path with the library under test.
"""

import math

import numpy as np


def conv_oracle(x, w, b, stride, pad):
    N, C, H, W = x.shape
    K, _, k, _ = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N, K, Ho, Wo))
    for n in range(N):
        for o in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def layer_norm_oracle(row, gain, bias, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((r - mu) ** 2 for r in row) / n
    return [(r - mu) / math.sqrt(var + eps) * g + b for r, g, b in zip(row, gain, bias)]


def bilinear_oracle(fmap, x, y):
    C, H, W = fmap.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(C)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < H and 0 <= xx < W:
                out += wy * wx * fmap[:, yy, xx]
    return out


def softmax_oracle(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def deformable_oracle(da, query, value):
    """Per-query, per-head, per-point sample-weight-sum for ``DeformableAttention``.

    Offsets are read from the offset predictor as ``[head][point][x, y]``.
    """
    B, H, W, C = query.shape
    heads, points = da.heads, da.points
    hd = C // heads
    Wo, bo = da.offsets.weight.data, da.offsets.bias.data
    Ww, bw = da.weights.weight.data, da.weights.bias.data
    Wv, bv = da.value_proj.weight.data, da.value_proj.bias.data
    Wout, bout = da.out_proj.weight.data, da.out_proj.bias.data
    scale = da.offset_scale.data
    out = np.zeros((B, H, W, C))
    for b in range(B):
        v = value[b] @ Wv + bv                         # [H, W, C]
        for y in range(H):
            for x in range(W):
                q = query[b, y, x]
                off = (q @ Wo + bo).reshape(heads, points, 2)
                logit = (q @ Ww + bw).reshape(heads, points)
                acc = np.zeros(C)
                for h in range(heads):
                    wts = softmax_oracle(list(logit[h]))
                    fmap = v[:, :, h * hd:(h + 1) * hd].transpose(2, 0, 1)
                    for p in range(points):
                        px = x + off[h, p, 0] * scale[h]
                        py = y + off[h, p, 1] * scale[h]
                        acc[h * hd:(h + 1) * hd] += wts[p] * bilinear_oracle(fmap, px, py)
                out[b, y, x] = acc @ Wout + bout
    return out


def f1_oracle(pred, mask, threshold=0.5):
    tp = fp = fn = 0
    for p, m in zip(np.ravel(pred), np.ravel(mask)):
        hit = p > threshold
        if hit and m:
            tp += 1
        elif hit:
            fp += 1
        elif m:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def auc_oracle(scores, mask):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    s = np.ravel(scores)
    y = np.ravel(mask).astype(bool)
    pos, neg = s[y], s[~y]
    total = 0.0
    for a in pos:
        total += np.sum(a > neg) + 0.5 * np.sum(a == neg)
    return total / (len(pos) * len(neg))
