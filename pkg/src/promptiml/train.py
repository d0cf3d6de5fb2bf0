"""Loss, optimizer, schedule, training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from promptiml.config import ConfigError, ModelConfig, TrainConfig
from promptiml.data import Sample, gen_base
from promptiml.metrics import mean_auc, mean_f1
from promptiml.model import PromptIML, prepare_images
from promptiml.nn import Linear, Parameter
from promptiml.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


# ------------------------------------------------------------------------ loss
def weighted_ce_loss(logits: Tensor, mask, w_pos: float, w_neg: float = 1.0) -> Tensor:
    """Mean weighted binary cross-entropy computed in logit space."""
    y = np.asarray(mask)
    if logits.shape != y.shape:
        raise ValueError(f"logits shape {logits.shape} != mask shape {y.shape}")
    if w_pos <= 0 or w_neg <= 0:
        raise ValueError("class weights must be positive")
    y = y.astype(logits.dtype)
    # -log sigmoid(l) = softplus(-l);  -log(1 - sigmoid(l)) = softplus(l)
    per_pixel = (w_pos * y) * (-logits).softplus() + (w_neg * (1 - y)) * logits.softplus()
    return per_pixel.mean()


def positive_weight(masks: np.ndarray, max_weight: float = 20.0) -> float:
    """``clamp(N_neg / N_pos, 1, max_weight)`` for a batch of masks."""
    n_pos = float(np.sum(masks))
    n_neg = float(np.size(masks)) - n_pos
    if n_pos == 0:
        return 1.0
    return float(np.clip(n_neg / n_pos, 1.0, max_weight))


# ------------------------------------------------------------------- optimizer
def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: dict, lr: float,
               cfg: TrainConfig) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    b1, b2 = cfg.betas
    t = state["t"] = state.get("t", 0) + 1
    ms = state.setdefault("m", [np.zeros_like(p) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p) for p in params])
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, ms, vs):
        if g is None:
            continue
        p *= 1 - lr * cfg.weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


class AdamW:
    """AdamW over the trainable (non-frozen) parameters only."""

    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.state: dict = {}

    def step(self, lr: float) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warm-up ``min_lr -> max_lr``, then cosine annealing with warm restarts.

    Each cosine cycle of ``T`` steps starts at ``max_lr`` and reaches
    ``min_lr`` on its last step; the next step restarts at ``max_lr``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.min_lr + (cfg.max_lr - cfg.min_lr) * step / warm
    T = cfg.restart_period or max(total - warm, 1)
    if T == 1:
        return cfg.max_lr
    t = (step - warm) % T
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1 + math.cos(math.pi * t / (T - 1)))


# ----------------------------------------------------------------------- model
def build_model(cfg: ModelConfig) -> PromptIML:
    """Construct the model, running the toy reconstruction pre-train if configured."""
    model = PromptIML(cfg)
    if cfg.use_sem and cfg.backbone_init == "toy-pretrain":
        toy_pretrain(model, cfg.pretrain_steps, cfg.seed)
    return model


def toy_pretrain(model: PromptIML, steps: int, seed: int, batch: int = 4) -> list[float]:
    """Train the semantic backbone to reconstruct image patches from its level-1 tokens, then refreeze."""
    cfg = model.cfg
    sem = model.sem
    p = cfg.patch_size
    for _, prm in sem.backbone_parameters():
        prm.requires_grad = True
    head = Linear(cfg.embed_dim, 3 * p * p, np.random.default_rng([seed, 7]), cfg.np_dtype)
    params = [prm for _, prm in sem.backbone_parameters()] + head.parameters()
    opt = AdamW(params, TrainConfig(max_lr=1e-3, weight_decay=0.0))
    sem.use_prompts = False
    losses = []
    try:
        for step in range(steps):
            imgs = np.stack([gen_base(int(seed) * 100_003 + step * batch + k, cfg.image_size) for k in range(batch)])
            x = prepare_images(imgs, cfg.np_dtype)
            tok = sem.layer_forward(sem.embed(x), 1)
            B, h, w, _ = tok.shape
            target = x.data.reshape(B, 3, h, p, w, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, h, w, -1)
            diff = head(tok) - Tensor(target)
            loss = (diff * diff).mean()
            opt.zero_grad()
            loss.backward()
            opt.step(1e-3)
            losses.append(float(loss.data))
    finally:
        sem.use_prompts = True
        sem.freeze_backbone()
    return losses


# ------------------------------------------------------------------- training
def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; a fresh permutation per epoch."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def train(model: PromptIML, samples: list[Sample], cfg: TrainConfig, steps: int | None = None,
          callback: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Optimize ``model`` on ``samples``; returns per-step records (step, loss, lr)."""
    if not samples:
        raise ValueError("no training samples")
    dtype = model.cfg.np_dtype
    spe = math.ceil(len(samples) / cfg.batch_size)
    total = steps if steps is not None else cfg.epochs * spe
    opt = AdamW(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    history = []
    stream = batches(len(samples), cfg.batch_size, rng)
    for step in range(total):
        idx = next(stream)
        x = prepare_images(images[idx], dtype)
        y = masks[idx]
        logits = model(x)
        loss = weighted_ce_loss(logits, y, positive_weight(y, cfg.pos_weight_max))
        opt.zero_grad()
        loss.backward()
        lr = lr_schedule(step, cfg, spe)
        opt.step(lr)
        model.project_constraints()
        rec = {"step": step + 1, "loss": float(loss.data), "lr": lr}
        history.append(rec)
        if callback is not None:
            callback(step + 1, rec)
        if (step + 1) % 50 == 0:
            log.info("step %d loss %.5f lr %.2e", step + 1, rec["loss"], lr)
    return history


def predict(model: PromptIML, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Tamper probabilities ``[N, H, W]`` for ``uint8 [N, H, W, 3]`` images."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(prepare_images(images[i:i + batch_size], model.cfg.np_dtype)).data
            out.append(1.0 / (1.0 + np.exp(-logits.astype(np.float64))))
    return np.concatenate(out)


def evaluate(model: PromptIML, samples: list[Sample]) -> dict:
    probs = predict(model, np.stack([s.image for s in samples]))
    masks = [s.mask for s in samples]
    return {"f1": mean_f1(probs, masks), "auc": mean_auc(probs, masks), "probs": probs}


# ----------------------------------------------------------------- checkpoints
CKPT_MAGIC = b"PIMLCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one inconsistent with the model configuration."""


def save_checkpoint(model: PromptIML, path, extra: dict | None = None) -> None:
    """Versioned JSON manifest followed by little-endian raw tensor buffers."""
    import dataclasses

    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.asarray(p.data, dtype=p.data.dtype.newbyteorder("<"))  # keeps 0-d shapes
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "precision": str(p.data.dtype),
                        "frozen": p.frozen, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": CKPT_VERSION, "model_config": dataclasses.asdict(model.cfg),
                           "tensors": entries, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[20:20 + mlen])
    base = 20 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["precision"]).newbyteorder("<")
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(e["precision"])
    return manifest, tensors


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[PromptIML, dict]:
    """Rebuild the model from a checkpoint; shapes are validated against the config."""
    manifest, tensors = read_checkpoint(path)
    try:
        stored = ModelConfig(**manifest["model_config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from exc
    cfg = cfg or stored
    model = PromptIML(cfg)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))[:5]
        raise CheckpointError(f"{path}: parameter set differs from config (e.g. {missing})")
    frozen = {e["name"]: e["frozen"] for e in manifest["tensors"]}
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, config expects {p.shape}")
        p.data = arr.astype(p.data.dtype).copy()
        p.requires_grad = not frozen[name]
    return model, manifest.get("extra", {})
