"""Per-pixel loss reweighting for training on noisy masks.

The weight maps come in four flavours, all computed online from the current
prediction: peak confidence, confidence spread, normalized loss (a spatial
softmax of the negated loss map, rescaled to mean one), and the product of
the last two. An OHEM baseline keeps only the highest-loss pixels instead.
Single-class crops always fall back to plain cross-entropy, since a crop
showing only one tissue cannot carry confusable supervision.

Weights are detached: gradients never flow through a weight map, so the
gradient of the weighted loss at a pixel is W * (softmax - onehot) / N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import log_softmax_channel, softmax_channel, softmax_flat
from .synthdata import IGNORE, PatchLabel


class MiningMode(str, Enum):
    NONE = "none"
    OHEM = "ohem"
    C_MAX = "c_max"
    C_DIFF = "c_diff"
    L_NORM = "l_norm"
    LC_MIX = "lc_mix"


MODE_NAMES = tuple(mode.value for mode in MiningMode)


@dataclass
class LossMap:
    """Per-pixel cross-entropy values; invalid (ignore) pixels hold 0 and are
    excluded from every statistic."""

    values: np.ndarray
    valid: np.ndarray


def _check_gt(logits: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if logits.ndim != 3:
        raise ValueError("logits must be C x H x W")
    if gt.shape != logits.shape[1:]:
        raise ValueError(
            f"mask shape {gt.shape} does not match logits {logits.shape[1:]}"
        )
    valid = gt != IGNORE
    if valid.any() and int(gt[valid].max()) >= logits.shape[0]:
        bad = int(gt[valid].max())
        raise ValueError(f"mask value {bad} out of range for {logits.shape[0]} channels")
    return valid


def pixel_ce(logits: np.ndarray, gt: np.ndarray) -> LossMap:
    """Per-pixel -log softmax(logits)[gt]; ignore pixels are excluded."""
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt)
    valid = _check_gt(logits, gt)
    values = np.zeros(gt.shape)
    if valid.any():
        logp = log_softmax_channel(logits)
        rows, cols = np.nonzero(valid)
        values[rows, cols] = -logp[gt[rows, cols].astype(np.intp), rows, cols]
    return LossMap(values=values, valid=valid)


def w_c_max(logits: np.ndarray) -> np.ndarray:
    """Peak per-pixel confidence: max over channels of the softmax scores."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        raise ValueError("need at least two channels")
    return softmax_channel(logits).max(axis=0)


def w_c_diff(logits: np.ndarray) -> np.ndarray:
    """Confidence spread: max minus min of the per-pixel softmax scores."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        raise ValueError("need at least two channels")
    probs = softmax_channel(logits)
    return probs.max(axis=0) - probs.min(axis=0)


def w_l_norm(loss: LossMap) -> np.ndarray:
    """Normalized-loss weights: softmax of -L over the valid pixels, divided
    by its mean, so low-loss pixels get weight > 1 and the mean is one."""
    if not loss.valid.any():
        raise ValueError("empty loss map")
    scores = softmax_flat(-loss.values[loss.valid])
    weights = np.zeros_like(loss.values)
    weights[loss.valid] = scores / scores.mean()
    return weights


def w_lc_mix(loss: LossMap, logits: np.ndarray) -> np.ndarray:
    """Normalized-loss weights scaled by peak confidence, elementwise."""
    confidence = w_c_max(logits)
    if confidence.shape != loss.values.shape:
        raise ValueError("loss map and logits extents differ")
    return w_l_norm(loss) * confidence


def w_l_norm_batch(losses: list[LossMap]) -> list[np.ndarray]:
    """Normalized-loss weights with the softmax pooled over a whole batch of
    loss maps instead of each map separately (experimental scope)."""
    pooled = np.concatenate([lm.values[lm.valid] for lm in losses])
    if pooled.size == 0:
        raise ValueError("empty loss maps")
    scores = softmax_flat(-pooled)
    scores = scores / scores.mean()
    out = []
    start = 0
    for lm in losses:
        count = int(lm.valid.sum())
        weights = np.zeros_like(lm.values)
        weights[lm.valid] = scores[start : start + count]
        out.append(weights)
        start += count
    return out


def weighted_ce(
    logits: np.ndarray, gt: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean over valid pixels of W * pixel CE, plus its gradient w.r.t. the
    logits. Weights are constants here: no gradient flows through them."""
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != gt.shape:
        raise ValueError("weight map extents do not match the mask")
    if (weights < 0).any():
        raise ValueError("negative loss weight")
    valid = _check_gt(logits, gt)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)

    loss_map = pixel_ce(logits, gt)
    loss = float((weights * loss_map.values)[valid].sum() / count)

    grad = softmax_channel(logits)
    rows, cols = np.nonzero(valid)
    grad[gt[rows, cols].astype(np.intp), rows, cols] -= 1.0
    grad *= np.where(valid, weights, 0.0)[None, :, :] / count
    return loss, grad


def ohem_loss(
    logits: np.ndarray, gt: np.ndarray, keep_fraction: float
) -> tuple[float, np.ndarray]:
    """Mean CE over the ceil(keep_fraction * N) highest-loss valid pixels;
    the rest receive zero gradient. Threshold ties keep row-major order."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    loss_map = pixel_ce(logits, gt)
    flat_values = loss_map.values.ravel()
    valid_idx = np.nonzero(loss_map.valid.ravel())[0]
    if valid_idx.size == 0:
        return 0.0, np.zeros_like(np.asarray(logits, dtype=np.float64))
    keep_count = math.ceil(keep_fraction * valid_idx.size)
    order = np.argsort(-flat_values[valid_idx], kind="stable")
    kept = valid_idx[order[:keep_count]]

    keep_mask = np.zeros(flat_values.shape, dtype=bool)
    keep_mask[kept] = True
    keep_mask = keep_mask.reshape(loss_map.values.shape)

    loss = float(flat_values[kept].mean())
    grad = softmax_channel(np.asarray(logits, dtype=np.float64))
    rows, cols = np.nonzero(keep_mask)
    grad[np.asarray(gt)[rows, cols].astype(np.intp), rows, cols] -= 1.0
    grad *= keep_mask[None, :, :] / keep_count
    return loss, grad


def ohem_weights(logits: np.ndarray, gt: np.ndarray, keep_fraction: float) -> np.ndarray:
    """The OHEM selection expressed as a detached weight map: kept pixels get
    N/keep_count so that weighted_ce reproduces ohem_loss exactly."""
    loss_map = pixel_ce(logits, gt)
    flat_values = loss_map.values.ravel()
    valid_idx = np.nonzero(loss_map.valid.ravel())[0]
    weights = np.zeros(flat_values.shape)
    if valid_idx.size == 0:
        return weights.reshape(loss_map.values.shape)
    keep_count = math.ceil(keep_fraction * valid_idx.size)
    order = np.argsort(-flat_values[valid_idx], kind="stable")
    weights[valid_idx[order[:keep_count]]] = valid_idx.size / keep_count
    return weights.reshape(loss_map.values.shape)


def mining_loss(
    logits: np.ndarray,
    gt: np.ndarray,
    label: PatchLabel,
    mode: MiningMode | str,
    ohem_keep: float = 0.25,
) -> tuple[float, np.ndarray]:
    """Dispatch the training loss for one crop.

    Crops with a single present class always use plain mean CE regardless of
    the mode; otherwise the mode picks the weight map (recomputed from the
    current prediction every call).
    """
    try:
        mode = MiningMode(mode)
    except ValueError:
        raise ValueError(f"unknown mining mode {mode!r}; valid: {MODE_NAMES}") from None
    if label.n < 1:
        raise ValueError("crop label must assert at least one class")
    gt_arr = np.asarray(gt)
    uniform = np.ones(gt_arr.shape)
    if label.n == 1 or mode is MiningMode.NONE:
        return weighted_ce(logits, gt_arr, uniform)
    if mode is MiningMode.OHEM:
        return ohem_loss(logits, gt_arr, ohem_keep)
    if mode is MiningMode.C_MAX:
        return weighted_ce(logits, gt_arr, w_c_max(logits))
    if mode is MiningMode.C_DIFF:
        return weighted_ce(logits, gt_arr, w_c_diff(logits))
    if mode is MiningMode.L_NORM:
        return weighted_ce(logits, gt_arr, w_l_norm(pixel_ce(logits, gt_arr)))
    return weighted_ce(logits, gt_arr, w_lc_mix(pixel_ce(logits, gt_arr), logits))
