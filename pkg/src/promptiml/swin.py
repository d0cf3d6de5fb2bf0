"""Windowed self-attention blocks shared by both feature branches.

Token maps are channels-last ``[B, H, W, C]`` tensors.  A block may receive a
prompt group ``[B, n_p, C]``; it is replicated into every attention window,
prepended to the window's tokens, and the prompt outputs are averaged back over
the windows afterwards.
"""

from __future__ import annotations

import numpy as np

from promptiml.nn import MLP, LayerNorm, Linear, Module
from promptiml.tensor import Tensor, concat, roll, softmax


class GridError(ValueError):
    """Token grid incompatible with the window or merge geometry."""


def window_geometry(H: int, W: int, window: int, shifted: bool) -> tuple[int, int]:
    """Effective (window size, shift) for an ``H x W`` grid."""
    ws = min(window, H, W)
    if H % ws or W % ws:
        raise GridError(f"grid {H}x{W} is not divisible into {ws}x{ws} windows")
    shift = ws // 2 if shifted and min(H, W) > window else 0
    return ws, shift


def window_partition(x: Tensor, ws: int) -> Tensor:
    B, H, W, C = x.shape
    x = x.reshape(B, H // ws, ws, W // ws, ws, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (H // ws) * (W // ws), ws * ws, C)


def window_reverse(win: Tensor, ws: int, B: int, H: int, W: int) -> Tensor:
    C = win.shape[-1]
    x = win.reshape(B, H // ws, W // ws, ws, ws, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def expand_prompts(P: Tensor, n_w: int) -> Tensor:
    """``[B, n_p, C] -> [B*n_w, n_p, C]``: one identical copy per window."""
    B, n_p, C = P.shape
    return P.reshape(B, 1, n_p, C).broadcast_to((B, n_w, n_p, C)).reshape(B * n_w, n_p, C)


def average_prompts(P_windows: Tensor, n_w: int) -> Tensor:
    """``[B*n_w, n_p, C] -> [B, n_p, C]``: mean over the window copies."""
    N, n_p, C = P_windows.shape
    if n_w < 1 or N % n_w:
        raise ValueError(f"leading extent {N} not divisible by n_w={n_w}")
    P = P_windows.reshape(N // n_w, n_w, n_p, C)
    # first copy plus mean deviation: exact when all copies are identical
    first = P[:, :1]
    return (first + (P - first).mean(axis=1, keepdims=True)).reshape(N // n_w, n_p, C)


def shift_keep_mask(H: int, W: int, ws: int, shift: int, n_prompts: int = 0) -> np.ndarray | None:
    """Boolean ``[n_w, S, S]`` attention mask (True = may attend) for shifted windows.

    After the cyclic roll, tokens from different original regions share a
    window; they must not attend to each other.  Prompt rows and columns are
    always visible.
    """
    if shift == 0:
        return None
    labels = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            labels[hs, wsl] = cnt
            cnt += 1
    lab = labels.reshape(H // ws, ws, W // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    region = lab[:, :, None] == lab[:, None, :]
    S = n_prompts + ws * ws
    keep = np.ones((lab.shape[0], S, S), dtype=bool)
    keep[:, n_prompts:, n_prompts:] = region
    return keep


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def forward(self, seq: Tensor, keep: np.ndarray | None = None) -> Tensor:
        N, S, C = seq.shape
        h = self.heads
        hd = C // h
        qkv = self.qkv(seq).reshape(N, S, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.swapaxes(-1, -2)) * (hd ** -0.5)
        if keep is not None:
            keep = np.tile(keep, (N // keep.shape[0], 1, 1))[:, None]
        att = softmax(att, axis=-1, mask=keep)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(N, S, C)
        return self.proj(out)


class SwinBlock(Module):
    """Pre-norm windowed attention + MLP, each with a residual connection."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, rng,
                 mlp_ratio: int = 4, dtype=np.float32):
        self.window = window
        self.shifted = shifted
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = WindowAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng, dtype)

    def forward(self, x: Tensor, prompts: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        B, H, W, C = x.shape
        ws, shift = window_geometry(H, W, self.window, self.shifted)
        n_w = (H // ws) * (W // ws)

        h = self.norm1(x)
        if shift:
            h = roll(h, (-shift, -shift), (1, 2))
        seq = window_partition(h, ws)
        n_p = 0
        if prompts is not None:
            n_p = prompts.shape[1]
            seq = concat([expand_prompts(self.norm1(prompts), n_w), seq], axis=1)
        out = self.attn(seq, shift_keep_mask(H, W, ws, shift, n_p))

        img = window_reverse(out[:, n_p:] if n_p else out, ws, B, H, W)
        if shift:
            img = roll(img, (shift, shift), (1, 2))
        x = x + img
        x = x + self.mlp(self.norm2(x))

        p_out = None
        if prompts is not None:
            zp = average_prompts(expand_prompts(prompts, n_w) + out[:, :n_p], n_w)
            p_out = zp + self.mlp(self.norm2(zp))
        return x, p_out


class PatchMerging(Module):
    """2x2 neighbourhood concat, LayerNorm, linear ``4C -> 2C``."""

    def __init__(self, dim: int, rng, dtype=np.float32):
        self.norm = LayerNorm(4 * dim, dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, dtype, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise GridError(f"cannot merge odd grid {H}x{W}")
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 4, 2, 5).reshape(B, H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(x))


class SwinLayer(Module):
    """Optional patch merge followed by ``depth`` blocks alternating unshifted/shifted windows."""

    def __init__(self, dim: int, depth: int, heads: int, window: int, rng, mlp_ratio: int = 4,
                 merge_from: int | None = None, dtype=np.float32):
        self.merge = PatchMerging(merge_from, rng, dtype) if merge_from else None
        self.blocks = [SwinBlock(dim, heads, window, shifted=(j % 2 == 1), rng=rng,
                                 mlp_ratio=mlp_ratio, dtype=dtype) for j in range(depth)]

    def forward(self, x: Tensor, prompts: list[Tensor] | None = None) -> Tensor:
        if self.merge is not None:
            x = self.merge(x)
        for j, blk in enumerate(self.blocks):
            x, _ = blk(x, None if prompts is None else prompts[j])
        return x


def tokens_to_grid(tokens: Tensor, H: int | None = None) -> Tensor:
    """``[B, L, C] -> [B, H, W, C]`` for a square (or given-height) grid."""
    B, L, C = tokens.shape
    if H is None:
        H = int(round(np.sqrt(L)))
    if H * (L // max(H, 1)) != L or H == 0:
        raise GridError(f"{L} tokens do not form a grid")
    return tokens.reshape(B, H, L // H, C)
