"""Frozen semantic branch adapted by per-block prompt tokens."""

from __future__ import annotations

import hashlib

import numpy as np

from promptiml.config import ModelConfig
from promptiml.nn import Conv2d, LayerNorm, Module, Parameter
from promptiml.swin import SwinLayer
from promptiml.tensor import Tensor


class PatchEmbed(Module):
    """Stride-p convolution, LayerNorm, plus a learnable positional embedding."""

    def __init__(self, patch: int, dim: int, grid: int, rng, dtype=np.float32):
        self.patch = patch
        self.proj = Conv2d(3, dim, patch, rng, stride=patch, dtype=dtype)
        self.norm = LayerNorm(dim, dtype)
        self.pos = Parameter((rng.normal(size=(grid * grid, dim)) * 0.02).astype(dtype))

    def forward(self, image: Tensor) -> Tensor:
        B, _, H, W = image.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
        x = self.norm(self.proj(image).transpose(0, 2, 3, 1))
        h, w = H // p, W // p
        if self.pos.shape[0] != h * w:
            raise ValueError(f"positional embedding holds {self.pos.shape[0]} tokens, image gives {h * w}")
        return x + self.pos.reshape(1, h, w, -1)


class PromptBank(Module):
    """``n_p x C_i`` prompt group for every (layer, block); always trainable."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        r = cfg.prompt_init_range
        self.index: dict[tuple[int, int], int] = {}
        self.prompts = []
        for i, (d, depth) in enumerate(zip(cfg.dims(), cfg.depths)):
            for j in range(depth):
                self.index[(i, j)] = len(self.prompts)
                self.prompts.append(Parameter(rng.uniform(-r, r, size=(cfg.n_prompts, d)).astype(dtype)))

    def group(self, layer: int, block: int, batch: int) -> Tensor:
        P = self.prompts[self.index[(layer, block)]]
        return P.reshape(1, *P.shape).broadcast_to((batch, *P.shape))

    def layer_groups(self, layer: int, depth: int, batch: int) -> list[Tensor]:
        return [self.group(layer, j, batch) for j in range(depth)]


class SemanticBranch(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=None):
        dtype = dtype or cfg.np_dtype
        dims, heads = cfg.dims(), cfg.heads()
        self.depths = cfg.depths
        self.embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, cfg.grids()[0], rng, dtype)
        self.layers = [SwinLayer(dims[i], cfg.depths[i], heads[i], cfg.window, rng, cfg.mlp_ratio,
                                 merge_from=dims[i - 1] if i else None, dtype=dtype)
                       for i in range(cfg.n_levels)]
        self.prompt_bank = PromptBank(cfg, rng, dtype)
        self.use_prompts = True

    # ---------------------------------------------------------------- freezing
    def backbone_parameters(self) -> list[tuple[str, Parameter]]:
        """Everything except the positional embedding and the prompts."""
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith("prompt_bank.") and n != "embed.pos"]

    def freeze_backbone(self) -> None:
        for _, p in self.backbone_parameters():
            p.requires_grad = False

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.backbone_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # ----------------------------------------------------------------- forward
    def layer_forward(self, x: Tensor, layer_index: int) -> Tensor:
        """Run layer ``layer_index`` (1-based) with its per-block prompt groups."""
        if not 1 <= layer_index <= len(self.layers):
            raise ValueError(f"layer_index must be in 1..{len(self.layers)}")
        i = layer_index - 1
        prompts = None
        if self.use_prompts:
            prompts = self.prompt_bank.layer_groups(i, self.depths[i], x.shape[0])
        return self.layers[i](x, prompts)

    def forward(self, image: Tensor) -> list[Tensor]:
        x = self.embed(image)
        out = []
        for i in range(len(self.layers)):
            x = self.layer_forward(x, i + 1)
            out.append(x)
        return out
