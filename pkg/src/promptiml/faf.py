"""Feature alignment and fusion between the semantic and high-frequency pyramids.

Alignment derives sigmoid channel gates (pooled features through an MLP) and
spatial gates (pointwise convolutions) from both branches and adds each
branch's gated features into the other.  Fusion enhances each branch with
deformable attention over the other and mixes them with two learnable scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promptiml.nn import MLP, Linear, Module, Parameter
from promptiml.tensor import Tensor, concat, sample_nhwc, softmax


@dataclass
class GateSet:
    channel_sem: Tensor   # [B, C]
    channel_hfq: Tensor   # [B, C]
    spatial_sem: Tensor   # [B, H, W]
    spatial_hfq: Tensor   # [B, H, W]


def _check_pair(F_sem: Tensor, F_hfq: Tensor) -> None:
    if F_sem.shape != F_hfq.shape:
        raise ValueError(f"branch features disagree: {F_sem.shape} vs {F_hfq.shape}")


class ChannelAttention(Module):
    def __init__(self, dim: int, rng, reduction: int = 4, dtype=np.float32):
        self.dim = dim
        self.mlp = MLP(2 * dim, max(2 * dim // reduction, 4), 2 * dim, rng, dtype, act="relu")

    @staticmethod
    def pooled(F_sem: Tensor, F_hfq: Tensor) -> Tensor:
        return concat([F_sem.mean(axis=(1, 2)), F_hfq.mean(axis=(1, 2))], axis=-1)

    def forward(self, F_sem: Tensor, F_hfq: Tensor) -> tuple[Tensor, Tensor]:
        _check_pair(F_sem, F_hfq)
        if F_sem.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {F_sem.shape[-1]}")
        w = self.mlp(self.pooled(F_sem, F_hfq)).sigmoid()
        return w[:, :self.dim], w[:, self.dim:]


class SpatialAttention(Module):
    """Concat -> 1x1 conv -> ReLU -> 1x1 conv to two maps -> sigmoid."""

    def __init__(self, dim: int, rng, reduction: int = 4, dtype=np.float32):
        self.dim = dim
        self.conv1 = Linear(2 * dim, max(2 * dim // reduction, 4), rng, dtype)
        self.conv2 = Linear(max(2 * dim // reduction, 4), 2, rng, dtype)

    def forward(self, F_sem: Tensor, F_hfq: Tensor) -> tuple[Tensor, Tensor]:
        _check_pair(F_sem, F_hfq)
        if F_sem.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {F_sem.shape[-1]}")
        w = self.conv2(self.conv1(concat([F_sem, F_hfq], axis=-1)).relu()).sigmoid()
        return w[..., 0], w[..., 1]


def align(F_sem: Tensor, F_hfq: Tensor, gates: GateSet) -> tuple[Tensor, Tensor]:
    """Crosswise residual exchange of gated features."""
    B, _, _, C = F_sem.shape
    cs = gates.channel_sem.reshape(B, 1, 1, C)
    ch = gates.channel_hfq.reshape(B, 1, 1, C)
    ss = gates.spatial_sem.reshape(*gates.spatial_sem.shape, 1)
    sh = gates.spatial_hfq.reshape(*gates.spatial_hfq.shape, 1)
    new_sem = F_sem + ch * F_hfq + sh * F_hfq
    new_hfq = F_hfq + cs * F_sem + ss * F_sem
    return new_sem, new_hfq


class DeformableAttention(Module):
    """Single-scale deformable attention with each query's own grid cell as reference.

    Per query and head, ``n_points`` offsets (pixels, times a learnable
    per-head scale) and softmax weights are predicted from the query token;
    the projected value map is read bilinearly (zero outside) at
    reference + offset and the weighted samples are summed.
    """

    def __init__(self, dim: int, heads: int, points: int, rng, offset_scale: float = 0.5,
                 dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads, self.points = heads, points
        self.value_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)
        self.offsets = Linear(dim, heads * points * 2, rng, dtype)
        self.offsets.weight.data *= 0.1
        # initial sampling ring: point p of head h at radius (p+1) along a head-specific direction
        ang = np.arange(heads)[:, None] * (2 * np.pi / heads) + np.arange(points)[None] * (np.pi / 2)
        rad = (np.arange(points) // 4 + 1)[None].astype(float)
        ring = np.stack([np.cos(ang) * rad, np.sin(ang) * rad], -1)
        self.offsets.bias.data[...] = ring.reshape(-1).astype(dtype)
        self.weights = Linear(dim, heads * points, rng, dtype)
        self.offset_scale = Parameter(np.full(heads, offset_scale, dtype=dtype))

    def sampling(self, query: Tensor) -> tuple[Tensor, Tensor]:
        """Sampling points ``[B, L, heads, points, 2]`` (x, y) and weights ``[B, L, heads, points]``."""
        B, H, W, C = query.shape
        L = H * W
        off = self.offsets(query).reshape(B, L, self.heads, self.points, 2)
        off = off * self.offset_scale.reshape(1, 1, self.heads, 1, 1)
        ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        ref = np.stack([xs.reshape(-1), ys.reshape(-1)], -1).astype(query.dtype).reshape(1, L, 1, 1, 2)
        w = softmax(self.weights(query).reshape(B, L, self.heads, self.points), axis=-1)
        return off + Tensor(ref), w

    def forward(self, query: Tensor, value: Tensor) -> Tensor:
        if query.shape[:3] != value.shape[:3]:
            raise ValueError(f"query grid {query.shape[:3]} differs from value grid {value.shape[:3]}")
        B, H, W, C = query.shape
        h, P, L = self.heads, self.points, H * W
        hd = C // h
        v = self.value_proj(value).reshape(B, H, W, h, hd).transpose(0, 3, 1, 2, 4).reshape(B * h, H, W, hd)
        pts, w = self.sampling(query)
        pts = pts.transpose(0, 2, 1, 3, 4).reshape(B * h, L * P, 2)
        s = sample_nhwc(v, pts).reshape(B, h, L, P, hd)
        wt = w.transpose(0, 2, 1, 3).reshape(B, h, L, P, 1)
        out = (s * wt).sum(axis=3).transpose(0, 2, 1, 3).reshape(B, H, W, C)
        return self.out_proj(out)


class Fusion(Module):
    def __init__(self, dim: int, heads: int, points: int, rng, gamma_init: float = 0.5,
                 offset_scale: float = 0.5, dtype=np.float32):
        self.dfa_sem = DeformableAttention(dim, heads, points, rng, offset_scale, dtype)
        self.dfa_hfq = DeformableAttention(dim, heads, points, rng, offset_scale, dtype)
        self.gamma1 = Parameter(np.array(gamma_init, dtype=dtype))
        self.gamma2 = Parameter(np.array(gamma_init, dtype=dtype))

    def forward(self, F_sem: Tensor, F_hfq: Tensor) -> Tensor:
        _check_pair(F_sem, F_hfq)
        attn_s = self.dfa_sem(F_sem, F_hfq)
        attn_h = self.dfa_hfq(F_hfq, F_sem)
        return self.gamma1 * (F_sem + attn_s) + self.gamma2 * (F_hfq + attn_h)


class FAFLevel(Module):
    """Alignment and fusion at one pyramid level, with the ablation switches."""

    def __init__(self, dim: int, rng, reduction: int = 4, heads: int = 2, points: int = 4,
                 gamma_init: float = 0.5, offset_scale: float = 0.5, use_align: bool = True,
                 use_fuse: bool = True, dtype=np.float32):
        self.use_align, self.use_fuse = use_align, use_fuse
        self.channel = ChannelAttention(dim, rng, reduction, dtype) if use_align else None
        self.spatial = SpatialAttention(dim, rng, reduction, dtype) if use_align else None
        self.fusion = Fusion(dim, heads, points, rng, gamma_init, offset_scale, dtype) if use_fuse else None

    def gates(self, F_sem: Tensor, F_hfq: Tensor) -> GateSet:
        cs, ch = self.channel(F_sem, F_hfq)
        ss, sh = self.spatial(F_sem, F_hfq)
        return GateSet(cs, ch, ss, sh)

    def align(self, F_sem: Tensor, F_hfq: Tensor) -> tuple[Tensor, Tensor]:
        if not self.use_align:
            return F_sem, F_hfq
        return align(F_sem, F_hfq, self.gates(F_sem, F_hfq))

    def fuse(self, F_sem: Tensor, F_hfq: Tensor) -> Tensor:
        if not self.use_fuse:
            return F_sem + F_hfq
        return self.fusion(F_sem, F_hfq)
