"""Full localization model: two feature branches, per-level alignment/fusion, mask decoder."""

from __future__ import annotations

import numpy as np

from promptiml.config import ModelConfig
from promptiml.decoder import MaskDecoder
from promptiml.faf import FAFLevel
from promptiml.highfreq import HighFreqBranch
from promptiml.nn import Module
from promptiml.semantic import SemanticBranch
from promptiml.tensor import Tensor

PIXEL_MEAN = 127.5
PIXEL_STD = 64.0


def prepare_images(images: np.ndarray, dtype=np.float32) -> Tensor:
    """``uint8 [B, H, W, 3]`` (or a single ``[H, W, 3]``) -> normalized ``[B, 3, H, W]``."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = (arr.astype(np.float64) - PIXEL_MEAN) / PIXEL_STD
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(dtype))


class PromptIML(Module):
    """Dual-branch feature extraction followed by the localization network.

    The semantic branch's backbone is frozen on construction; its positional
    embedding and prompts remain trainable.  Branch switches in the config
    select the ablation settings.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = cfg.np_dtype
        # fixed sub-seeds keep each part's initialization independent of which parts exist
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        self.sem = SemanticBranch(cfg, np.random.default_rng(seeds[0]), dtype) if cfg.use_sem else None
        self.hfq = HighFreqBranch(cfg, np.random.default_rng(seeds[1]), dtype) if cfg.use_hfq else None
        frng = np.random.default_rng(seeds[2])
        self.faf = []
        if cfg.use_sem and cfg.use_hfq:
            self.faf = [FAFLevel(d, frng, cfg.faf_reduction, cfg.deform_heads, cfg.deform_points,
                                 cfg.gamma_init, cfg.deform_offset_scale, cfg.use_align, cfg.use_fuse, dtype)
                        for d in cfg.dims()]
        self.decoder = MaskDecoder(cfg.dims(), cfg.decoder_dim, cfg.decoder_heads, cfg.decoder_rounds,
                                   np.random.default_rng(seeds[3]), cfg.mask_threshold, dtype)
        if self.sem is not None:
            self.sem.freeze_backbone()

    def fused_pyramid(self, x: Tensor) -> list[Tensor]:
        """Per-level decoder inputs, finest first."""
        n = self.cfg.n_levels
        if self.sem is None:
            return self.hfq(x)
        if self.hfq is None:
            return self.sem(x)
        s = self.sem.embed(x)
        h = self.hfq.stem(x)
        out = []
        for i in range(n):
            s = self.sem.layer_forward(s, i + 1)
            h = self.hfq.layer_forward(h, i + 1)
            s, h = self.faf[i].align(s, h)
            out.append(self.faf[i].fuse(s, h))
        return out

    def forward(self, x: Tensor) -> Tensor:
        """Normalized images ``[B, 3, H, W]`` -> tamper logits ``[B, H, W]``."""
        H, W = x.shape[2:]
        return self.decoder(self.fused_pyramid(x), (H, W))

    def frozen_checksum(self) -> str | None:
        return self.sem.backbone_checksum() if self.sem is not None else None

    def project_constraints(self) -> None:
        if self.hfq is not None:
            self.hfq.bank.project_()
