"""Localization head: FPN-style pixel decoder plus a single-query masked-attention decoder."""

from __future__ import annotations

import numpy as np

from promptiml.nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from promptiml.tensor import Tensor, resize_bilinear, softmax


class PixelDecoder(Module):
    """Lateral 1x1 projections, x2 bilinear upsampling and 3x3 smoothing, coarse to fine."""

    def __init__(self, dims: list[int], dim: int, rng, dtype=np.float32):
        self.laterals = [Linear(d, dim, rng, dtype) for d in dims]
        self.smooth = [Conv2d(dim, dim, 3, rng, padding=1, dtype=dtype) for _ in dims[:-1]]

    def stage(self, coarse: Tensor, fine: Tensor, level: int) -> Tensor:
        """One upsampling step merging into ``level`` (0-based, finest = 0)."""
        _, H, W, _ = fine.shape
        y = resize_bilinear(coarse, H, W) + self.laterals[level](fine)
        y = self.smooth[level](y.transpose(0, 3, 1, 2)).transpose(0, 2, 3, 1)
        return y.gelu()

    def forward(self, pyramid: list[Tensor]) -> list[Tensor]:
        """Return per-level maps ordered coarse to fine; the last is the patch-resolution map."""
        if len(pyramid) != len(self.laterals):
            raise ValueError(f"expected {len(self.laterals)} levels, got {len(pyramid)}")
        for a, b in zip(pyramid[:-1], pyramid[1:]):
            if a.shape[1] != 2 * b.shape[1] or a.shape[2] != 2 * b.shape[2]:
                raise ValueError(f"level grids must halve: {a.shape[1:3]} -> {b.shape[1:3]}")
        y = self.laterals[-1](pyramid[-1])
        maps = [y]
        for level in range(len(pyramid) - 2, -1, -1):
            y = self.stage(y, pyramid[level], level)
            maps.append(y)
        return maps


def resample_logits(logits: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average (integer factor) or bilinear resample of ``[B, H, W]`` logits."""
    B, H, W = logits.shape
    if H % h == 0 and W % w == 0:
        return logits.reshape(B, h, H // h, w, W // w).mean(axis=(2, 4))
    from promptiml.tensor.functional import interp_matrix
    return np.einsum("oh,bhw,pw->bop", interp_matrix(H, h), logits, interp_matrix(W, w))


class MaskedCrossAttention(Module):
    """Cross-attention of the query over level tokens, restricted to the previous mask.

    Positions where sigmoid(previous logits) <= threshold are excluded.  A
    batch element with every position excluded attends everywhere instead.
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.o_proj = Linear(dim, dim, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, 2 * dim, dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.last_weights: np.ndarray | None = None

    @staticmethod
    def keep_mask(prev_logits: np.ndarray | None, threshold: float = 0.5) -> np.ndarray | None:
        """``[B, L]`` boolean mask from previous-round logits, with the all-masked fallback."""
        if prev_logits is None:
            return None
        cut = np.log(threshold / (1 - threshold))
        keep = prev_logits.reshape(prev_logits.shape[0], -1) > cut
        keep[~keep.any(axis=1)] = True
        return keep

    def forward(self, query: Tensor, tokens: Tensor, keep: np.ndarray | None = None) -> Tensor:
        if query.ndim != 3 or query.shape[1] != 1:
            raise ValueError(f"expected a single query [B, 1, D], got {query.shape}")
        B, L, D = tokens.shape
        h = self.heads
        hd = D // h
        q = self.q_proj(query).reshape(B, 1, h, hd).transpose(0, 2, 1, 3)
        k = self.k_proj(tokens).reshape(B, L, h, hd).transpose(0, 2, 3, 1)
        v = self.v_proj(tokens).reshape(B, L, h, hd).transpose(0, 2, 1, 3)
        att = softmax((q @ k) * (hd ** -0.5), axis=-1,
                      mask=None if keep is None else keep[:, None, None, :])
        self.last_weights = att.data
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, 1, D)
        x = self.norm1(query + self.o_proj(out))
        return self.norm2(x + self.mlp(x))


class MaskHead(Module):
    def __init__(self, dim: int, rng, dtype=np.float32):
        self.embed = MLP(dim, dim, dim, rng, dtype)

    def forward(self, query: Tensor, features: Tensor, out_hw: tuple[int, int] | None = None) -> Tensor:
        """Per-pixel dot product of the projected query with ``features[B,h,w,D]``.

        Returns logits ``[B, h, w]``, bilinearly resized to ``out_hw`` if given.
        """
        B, h, w, D = features.shape
        if query.shape[-1] != D:
            raise ValueError(f"query dim {query.shape[-1]} != feature dim {D}")
        e = self.embed(query).reshape(B, D, 1)
        logits = (features.reshape(B, h * w, D) @ e).reshape(B, h, w, 1)
        if out_hw is not None and out_hw != (h, w):
            logits = resize_bilinear(logits, *out_hw)
        return logits.reshape(*logits.shape[:3])


class MaskDecoder(Module):
    """Pixel decoder plus ``rounds`` masked cross-attention rounds over the coarse levels."""

    def __init__(self, dims: list[int], dim: int, heads: int, rounds: int, rng,
                 threshold: float = 0.5, dtype=np.float32):
        self.pixel = PixelDecoder(dims, dim, rng, dtype)
        self.query = Parameter((rng.normal(size=(1, dim)) * 0.5).astype(dtype))
        self.level_embed = Parameter((rng.normal(size=(rounds, dim)) * 0.02).astype(dtype))
        self.rounds = [MaskedCrossAttention(dim, heads, rng, dtype) for _ in range(rounds)]
        self.head = MaskHead(dim, rng, dtype)
        self.threshold = threshold
        self.round_logits: list[np.ndarray] = []

    def forward(self, pyramid: list[Tensor], out_hw: tuple[int, int]) -> Tensor:
        maps = self.pixel(pyramid)
        feats = maps[-1]
        B, _, _, D = feats.shape
        q = self.query.reshape(1, 1, D).broadcast_to((B, 1, D))
        prev = None
        self.round_logits = []
        for r, layer in enumerate(self.rounds):
            level = maps[r]
            _, h, w, _ = level.shape
            keep = None
            if prev is not None:
                keep = MaskedCrossAttention.keep_mask(resample_logits(prev, h, w), self.threshold)
            tokens = level.reshape(B, h * w, D) + self.level_embed[r]
            q = layer(q, tokens, keep)
            logits = self.head(q, feats)
            prev = logits.data
            self.round_logits.append(prev)
        return resize_bilinear(logits.reshape(*logits.shape, 1), *out_hw).reshape(B, *out_hw)
