"""Pixel-level localization metrics."""

from __future__ import annotations

import numpy as np


class UndefinedAUCError(ValueError):
    """AUC requested for a mask containing a single class."""


def _check(pred, mask):
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask)
    if pred.shape != mask.shape:
        raise ValueError(f"prediction shape {pred.shape} != mask shape {mask.shape}")
    return pred, mask.astype(bool)


def confusion(pred_probs, mask, threshold: float = 0.5) -> tuple[int, int, int]:
    """(TP, FP, FN) after binarizing ``pred_probs > threshold``."""
    pred, gt = _check(pred_probs, mask)
    p = pred > threshold
    return int(np.sum(p & gt)), int(np.sum(p & ~gt)), int(np.sum(~p & gt))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0  # both empty
    return 2 * tp / (2 * tp + fp + fn)


def f1_fixed(pred_probs, mask, threshold: float = 0.5) -> float:
    """F1 at a fixed threshold; 1 when prediction and mask are both empty, 0 when only one is."""
    return f1_from_counts(*confusion(pred_probs, mask, threshold))


def pixel_auc(pred_probs, mask) -> float:
    """Mann-Whitney ROC AUC over pixels with midranks for ties."""
    pred, gt = _check(pred_probs, mask)
    s = pred.reshape(-1)
    y = gt.reshape(-1)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined for a single-class mask")
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    # midrank of each distinct value (1-based ranks)
    ends = np.cumsum(counts)
    mid = ends - (counts - 1) / 2.0
    ranks = mid[inv]
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_f1(preds, masks, threshold: float = 0.5) -> float:
    """Per-image F1 averaged over a set of images."""
    return float(np.mean([f1_fixed(p, m, threshold) for p, m in zip(preds, masks)]))


def mean_auc(preds, masks) -> float:
    """Per-image AUC averaged over images where it is defined (NaN if none)."""
    vals = []
    for p, m in zip(preds, masks):
        try:
            vals.append(pixel_auc(p, m))
        except UndefinedAUCError:
            continue
    return float(np.mean(vals)) if vals else float("nan")
