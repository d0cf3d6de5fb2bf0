"""High-frequency branch: constrained BayarConv stem and a trainable windowed-attention pyramid."""

from __future__ import annotations

import numpy as np

from promptiml.config import ModelConfig
from promptiml.nn import Conv2d, Module, Parameter
from promptiml.swin import SwinLayer
from promptiml.tensor import Tensor, concat, conv2d, pad2d_edge


def bayar_project(kernel: np.ndarray) -> np.ndarray:
    """Project ``[K, C, k, k]`` kernels onto the constraint set.

    Centre tap becomes exactly -1; off-centre taps are rescaled to sum to 1
    per (out, in) slice, or reset to uniform ``1/(k*k-1)`` when their sum
    vanishes.
    """
    K, C, k, _ = kernel.shape
    c = k // 2
    w = kernel.astype(np.float64).reshape(K, C, k * k)
    centre = c * k + c
    w[:, :, centre] = 0.0
    s = w.sum(-1, keepdims=True)
    ok = np.abs(s) > 1e-12
    w = np.where(ok, w / np.where(ok, s, 1.0), 1.0 / (k * k - 1))
    out = w.astype(kernel.dtype)
    if out.dtype != np.float64:
        # absorb the cast's rounding residual into the smallest off-centre tap,
        # where the target precision is finest
        mag = np.abs(out).astype(np.float64)
        mag[:, :, centre] = np.inf
        j = np.argmin(mag, axis=-1)[..., None]
        resid = 1.0 - out.astype(np.float64).sum(-1, keepdims=True)
        np.put_along_axis(out, j, np.take_along_axis(out, j, -1).astype(np.float64) + resid, -1)
    out[:, :, centre] = -1.0
    return out.reshape(K, C, k, k)


class BayarKernelBank(Module):
    """One constrained kernel tensor per size, each ``[C'/n_sizes, 3, k, k]``."""

    def __init__(self, out_channels: int, sizes, rng, dtype=np.float32):
        per = out_channels // len(sizes)
        self.sizes = tuple(sizes)
        self.kernels = [Parameter(bayar_project(rng.uniform(0, 1, size=(per, 3, k, k)).astype(dtype)))
                        for k in self.sizes]

    def project_(self) -> None:
        for p in self.kernels:
            p.data[...] = bayar_project(p.data)

    def forward(self, image: Tensor) -> Tensor:
        """Stride-1 replicate-padded responses, channel-concatenated: ``[B, C', H, W]``."""
        outs = [conv2d(pad2d_edge(image, k // 2), w) for k, w in zip(self.sizes, self.kernels)]
        return concat(outs, axis=1)


class HighFreqBranch(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=None):
        dtype = dtype or cfg.np_dtype
        C = cfg.embed_dim
        self.patch_size = cfg.patch_size
        self.bank = BayarKernelBank(C, cfg.bayar_sizes, rng, dtype)
        self.aggregate = Conv2d(C, C, cfg.patch_size, rng, stride=cfg.patch_size, dtype=dtype)
        dims, heads = cfg.dims(), cfg.heads()
        self.layers = [SwinLayer(dims[i], cfg.depths[i], heads[i], cfg.window, rng, cfg.mlp_ratio,
                                 merge_from=dims[i - 1] if i else None, dtype=dtype)
                       for i in range(cfg.n_levels)]

    def stem(self, image: Tensor) -> Tensor:
        """``[B, 3, H, W] -> [B, H', W', C']`` token map."""
        B, _, H, W = image.shape
        p = self.patch_size
        if H % p or W % p:
            raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
        feat = self.bank(image)
        return self.aggregate(feat).transpose(0, 2, 3, 1)

    def layer_forward(self, x: Tensor, layer_index: int) -> Tensor:
        """Run layer ``layer_index`` (1-based) on a token map."""
        if not 1 <= layer_index <= len(self.layers):
            raise ValueError(f"layer_index must be in 1..{len(self.layers)}")
        return self.layers[layer_index - 1](x)

    def forward(self, image: Tensor) -> list[Tensor]:
        x = self.stem(image)
        out = []
        for i in range(len(self.layers)):
            x = self.layer_forward(x, i + 1)
            out.append(x)
        return out
