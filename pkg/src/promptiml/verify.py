"""Gradient verification suite: every trainable operation against central differences.

All checks run in double precision on tiny configurations.  Each check
reduces the operation's output to a scalar with fixed random weights, so the
gradients are generic rather than structured.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from promptiml.config import ModelConfig
from promptiml.decoder import MaskDecoder
from promptiml.faf import ChannelAttention, DeformableAttention, FAFLevel, GateSet, SpatialAttention, align
from promptiml.highfreq import HighFreqBranch
from promptiml.model import PromptIML
from promptiml.semantic import PatchEmbed
from promptiml.swin import PatchMerging, SwinBlock
from promptiml.tensor import (Tensor, bilinear_sample, check_leaves, conv2d, layer_norm, resize_bilinear,
                              softmax)
from promptiml.train import weighted_ce_loss

F64 = np.float64
TOLERANCE = 1e-4
# Central differences carry O(eps^2) truncation and O(u/eps) roundoff; eps near
# the cube root of double-precision unit roundoff balances the two.
EPS = 1e-5


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=16, patch_size=2, embed_dim=12, depths=(1, 1, 1, 1), window=2, head_dim=6,
                mlp_ratio=2, n_prompts=2, deform_heads=2, deform_points=2, decoder_dim=8,
                decoder_heads=2, decoder_rounds=3, dtype="float64", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def _t(rng, *shape, scale=1.0, grad=True) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=grad)


def _readout(out: Tensor, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=out.shape)


def _check(fn: Callable[[], Tensor], leaves, eps=EPS, max_coords=12, seed=0) -> float:
    w = _readout(fn(), seed + 100)
    return check_leaves(lambda: (fn() * w).sum(), leaves, eps=eps, max_coords=max_coords, seed=seed)


def _params(module, max_tensors=None):
    ps = [p for p in module.parameters() if p.requires_grad]
    return ps if max_tensors is None else ps[:max_tensors]


# -------------------------------------------------------------------- checks
def check_conv2d():
    r = np.random.default_rng(0)
    x, w, b = _t(r, 2, 3, 7, 7), _t(r, 4, 3, 3, 3), _t(r, 4)
    return _check(lambda: conv2d(x, w, b, stride=2, padding=1), [x, w, b])


def check_layer_norm():
    r = np.random.default_rng(1)
    x, g, b = _t(r, 3, 5, 6), _t(r, 6), _t(r, 6)
    return _check(lambda: layer_norm(x, g, b), [x, g, b])


def check_softmax():
    r = np.random.default_rng(2)
    x = _t(r, 4, 7)
    mask = r.random((4, 7)) > 0.3
    mask[:, 0] = True
    return _check(lambda: softmax(x, mask=mask), [x])


def check_bilinear():
    r = np.random.default_rng(3)
    m = _t(r, 3, 6, 5)
    pts = Tensor(r.uniform(-1.5, 6.5, size=(9, 2)), requires_grad=True)
    return _check(lambda: bilinear_sample(m, pts), [m, pts])


def check_resize():
    r = np.random.default_rng(4)
    x = _t(r, 2, 3, 4, 2)
    return _check(lambda: resize_bilinear(x, 6, 8), [x])


def check_bayar_stem():
    cfg = tiny_config()
    hb = HighFreqBranch(cfg, np.random.default_rng(5))
    img = Tensor(np.random.default_rng(6).normal(size=(2, 3, 16, 16)))
    return _check(lambda: hb.stem(img), hb.bank.kernels + [hb.aggregate.weight, hb.aggregate.bias])


def check_patch_embed():
    r = np.random.default_rng(7)
    pe = PatchEmbed(2, 12, 4, r, F64)
    img = _t(r, 2, 3, 8, 8)
    return _check(lambda: pe(img), [img] + pe.parameters())


def _block_check(shifted: bool, seed: int):
    r = np.random.default_rng(seed)
    blk = SwinBlock(12, 2, 2, shifted, r, mlp_ratio=2, dtype=F64)
    x = _t(r, 2, 4, 4, 12)
    P = _t(r, 2, 2, 12, scale=0.5)
    leaves = [x, P, blk.attn.qkv.weight, blk.attn.proj.weight, blk.mlp.fc1.weight, blk.mlp.fc2.bias,
              blk.norm1.gain]
    return _check(lambda: blk(x, P)[0], leaves, seed=seed)


def check_window_block():
    return _block_check(False, 8)


def check_shifted_window_block():
    return _block_check(True, 9)


def check_patch_merging():
    r = np.random.default_rng(10)
    pm = PatchMerging(6, r, F64)
    x = _t(r, 2, 4, 4, 6)
    return _check(lambda: pm(x), [x] + pm.parameters())


def check_channel_attention():
    r = np.random.default_rng(11)
    ca = ChannelAttention(6, r, 2, F64)
    s, h = _t(r, 2, 3, 3, 6), _t(r, 2, 3, 3, 6)
    return _check(lambda: _flat_cat(ca(s, h)), [s, h] + ca.parameters())


def check_spatial_attention():
    r = np.random.default_rng(12)
    sa = SpatialAttention(6, r, 2, F64)
    s, h = _t(r, 2, 3, 3, 6), _t(r, 2, 3, 3, 6)
    return _check(lambda: _flat_cat(sa(s, h)), [s, h] + sa.parameters())


def check_align():
    r = np.random.default_rng(13)
    s, h = _t(r, 2, 3, 3, 4), _t(r, 2, 3, 3, 4)
    gs = [_t(r, 2, 4), _t(r, 2, 4), _t(r, 2, 3, 3), _t(r, 2, 3, 3)]
    return _check(lambda: _flat_cat(align(s, h, GateSet(*gs))), [s, h] + gs)


def check_deformable_attention():
    r = np.random.default_rng(14)
    da = DeformableAttention(8, 2, 3, r, offset_scale=0.7, dtype=F64)
    da.offsets.weight.data[...] = r.normal(size=da.offsets.weight.shape) * 0.5
    q, v = _t(r, 2, 4, 5, 8), _t(r, 2, 4, 5, 8)
    return _check(lambda: da(q, v), [q, v] + da.parameters(), max_coords=10)


def check_fusion():
    r = np.random.default_rng(15)
    lvl = FAFLevel(8, r, 2, 2, 2, dtype=F64)
    s, h = _t(r, 2, 4, 4, 8), _t(r, 2, 4, 4, 8)
    fu = lvl.fusion
    leaves = [s, h, fu.gamma1, fu.gamma2, fu.dfa_sem.offsets.weight, fu.dfa_hfq.weights.weight]
    return _check(lambda: fu(s, h), leaves)


def check_decoder():
    cfg = tiny_config()
    r = np.random.default_rng(16)
    dec = MaskDecoder(cfg.dims(), 8, 2, 3, r, dtype=F64)
    pyr = [_t(r, 2, g, g, d) for g, d in zip(cfg.grids(), cfg.dims())]
    leaves = [dec.query, dec.level_embed, dec.rounds[1].k_proj.weight, dec.head.embed.fc2.weight,
              dec.pixel.smooth[0].weight, dec.pixel.laterals[3].weight, pyr[0], pyr[3]]
    return _check(lambda: dec(pyr, (16, 16)), leaves)


def check_loss():
    r = np.random.default_rng(17)
    logits = _t(r, 2, 5, 5, scale=3.0)
    mask = r.random((2, 5, 5)) > 0.6
    return check_leaves(lambda: weighted_ce_loss(logits, mask, 3.5, 1.0), [logits], eps=EPS)


def check_full_model():
    cfg = tiny_config()
    model = PromptIML(cfg)
    r = np.random.default_rng(18)
    img = Tensor(r.normal(size=(2, 3, 16, 16)))
    mask = r.random((2, 16, 16)) > 0.7
    leaves = [model.sem.prompt_bank.prompts[0], model.sem.prompt_bank.prompts[2], model.sem.embed.pos,
              model.hfq.bank.kernels[1], model.hfq.layers[1].blocks[0].attn.qkv.weight,
              model.faf[0].channel.mlp.fc1.weight, model.faf[1].spatial.conv1.weight,
              model.faf[2].fusion.gamma1, model.faf[0].fusion.dfa_sem.offsets.weight, model.decoder.query]
    return check_leaves(lambda: weighted_ce_loss(model(img), mask, 2.0), leaves, eps=EPS, max_coords=6)


def _flat_cat(parts) -> Tensor:
    """Flatten and concatenate a tuple of outputs into one tensor."""
    from promptiml.tensor import concat
    return concat([p.reshape(-1) for p in parts], axis=0)


CHECKS: dict[str, Callable[[], float]] = {
    "conv2d": check_conv2d,
    "layer_norm": check_layer_norm,
    "softmax": check_softmax,
    "bilinear_sample": check_bilinear,
    "resize_bilinear": check_resize,
    "bayar_stem": check_bayar_stem,
    "patch_embed": check_patch_embed,
    "window_block_prompts": check_window_block,
    "shifted_window_block_prompts": check_shifted_window_block,
    "patch_merging": check_patch_merging,
    "channel_attention": check_channel_attention,
    "spatial_attention": check_spatial_attention,
    "align": check_align,
    "deformable_attention": check_deformable_attention,
    "gamma_fusion": check_fusion,
    "decoder": check_decoder,
    "weighted_ce_loss": check_loss,
    "full_model": check_full_model,
}


def gradient_suite(tolerance: float = TOLERANCE, names=None) -> list[dict]:
    """Run the checks; each result holds name, max relative error, pass flag and seconds."""
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        err = float(CHECKS[name]())
        results.append({"name": name, "max_rel_error": err, "passed": err <= tolerance,
                        "seconds": time.perf_counter() - t0})
    return results
