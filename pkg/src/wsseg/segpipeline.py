"""Stage 2: segmentation training on (pseudo-)masks, tiled multi-scale
inference, and overlap metrics from global confusion counts.

The network is the shared encoder plus a 1x1 classifier at 1/8 resolution,
bilinearly upsampled back to the input extent. F1 here is pixel-level
(harmonic mean of global pixel precision/recall per class), which for
binary no-ignore masks coincides with Dice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import MIN_INPUT, WIDTHS, Encoder
from .mining import MiningMode, mining_loss, pixel_ce, w_c_max, w_l_norm_batch, weighted_ce
from .numerics import (
    NumericError,
    ParamStore,
    bilinear_resize,
    bilinear_resize_backward,
    make_rng,
    softmax_channel,
)
from .synthdata import (
    IGNORE,
    grid_positions,
    merge_patches,
    presence_from_mask,
)

INPUT_OFFSET = 0.5
MOMENTUM = 0.9  # classic SGD momentum; the micro nets need it to converge


def poly_lr(base: float, it: int, max_iter: int, power: float) -> float:
    """Polynomial decay: base * (1 - it/max_iter)^power."""
    if not (0 <= it <= max_iter):
        raise ValueError("iteration outside [0, max_iter]")
    if max_iter == 0:
        return base
    return base * (1.0 - it / max_iter) ** power


@dataclass
class TrainConfig:
    lr: float = 5e-3
    iterations: int = 200
    batch: int = 4
    poly_power: float = 0.9
    crop: int = 48
    seed: int = 0
    mining: MiningMode = MiningMode.NONE
    ohem_keep: float = 0.25
    norm_scope: str = "crop"  # "crop" or the experimental "batch"
    min_presence: float = 0.01

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.crop < MIN_INPUT:
            raise ValueError(f"crop must be >= {MIN_INPUT}")
        if self.norm_scope not in ("crop", "batch"):
            raise ValueError("norm_scope must be 'crop' or 'batch'")
        if not (0 < self.min_presence <= 0.5):
            raise ValueError("min_presence must be in (0, 0.5]")
        MiningMode(self.mining)


class SegNet:
    """Encoder + 1x1 classifier head, upsampled to the input resolution."""

    min_input = MIN_INPUT

    def __init__(self, in_channels: int = 3, n_classes: int = 2, seed: int = 0):
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.params = ParamStore()
        rng = make_rng(seed, "segnet-init")
        self.encoder = Encoder(self.params, in_channels, rng)
        self.params.add("head.weight", rng.standard_normal((n_classes, WIDTHS[-1])) * 0.01)
        self.params.add("head.bias", np.zeros(n_classes))

    def forward(self, x: np.ndarray):
        if x.shape[0] != self.in_channels:
            raise ValueError(
                f"channel mismatch: input has {x.shape[0]}, net expects {self.in_channels}"
            )
        stages, enc_cache = self.encoder.forward(x)
        deep = stages[2]
        low = (
            np.einsum("cf,fhw->chw", self.params.params["head.weight"], deep)
            + self.params.params["head.bias"][:, None, None]
        )
        logits = bilinear_resize(low, x.shape[1], x.shape[2])
        cache = {"stages": stages, "enc": enc_cache, "deep": deep, "low_hw": low.shape[1:]}
        return logits, cache

    def backward(self, cache, d_logits: np.ndarray) -> None:
        lh, lw = cache["low_hw"]
        d_low = bilinear_resize_backward(lh, lw, d_logits)
        deep = cache["deep"]
        self.params.accumulate("head.bias", d_low.sum(axis=(1, 2)))
        self.params.accumulate(
            "head.weight", np.einsum("chw,fhw->cf", d_low, deep)
        )
        d_deep = np.einsum("cf,chw->fhw", self.params.params["head.weight"], d_low)
        zeros = [np.zeros_like(stages) for stages in cache["stages"][:2]]
        self.encoder.backward(cache["enc"], zeros + [d_deep])


def _crop_losses(samples, cfg: TrainConfig):
    """Loss and logit-grad per crop; pools the normalized-loss softmax over
    the eligible crops of the batch when norm_scope is 'batch'."""
    mode = MiningMode(cfg.mining)
    results = [None] * len(samples)
    pooled = (
        [i for i, s in enumerate(samples) if s["label"].n > 1]
        if cfg.norm_scope == "batch" and mode in (MiningMode.L_NORM, MiningMode.LC_MIX)
        else []
    )
    if pooled:
        loss_maps = [pixel_ce(samples[i]["logits"], samples[i]["mask"]) for i in pooled]
        weight_maps = w_l_norm_batch(loss_maps)
        for i, weights in zip(pooled, weight_maps):
            if mode is MiningMode.LC_MIX:
                weights = weights * w_c_max(samples[i]["logits"])
            results[i] = weighted_ce(samples[i]["logits"], samples[i]["mask"], weights)
    for i, sample in enumerate(samples):
        if results[i] is None:
            results[i] = mining_loss(
                sample["logits"], sample["mask"], sample["label"], mode, cfg.ohem_keep
            )
    return results


def train_seg(
    images: list[np.ndarray],
    masks: list[np.ndarray],
    cfg: TrainConfig,
) -> tuple[SegNet, list[tuple[int, float, float]]]:
    """SGD with polynomial decay over random flipped crops; the per-crop loss
    is dispatched by the mining mode with the crop's own class presence.
    Returns the net and a (iteration, loss, lr) curve."""
    cfg.validate()
    if len(images) != len(masks) or not images:
        raise ValueError("need matching, non-empty image and mask lists")
    for image, mask in zip(images, masks):
        if image.shape[1:] != mask.shape:
            raise ValueError("image and mask extents differ")
        if min(mask.shape) < cfg.crop:
            raise ValueError("crop side exceeds an image extent")

    net = SegNet(in_channels=images[0].shape[0], seed=cfg.seed)
    rng = make_rng(cfg.seed, "seg-train")
    curve: list[tuple[int, float, float]] = []
    for it in range(cfg.iterations):
        samples = []
        for _ in range(cfg.batch):
            idx = int(rng.integers(len(images)))
            h, w = masks[idx].shape
            r0 = int(rng.integers(h - cfg.crop + 1))
            c0 = int(rng.integers(w - cfg.crop + 1))
            img = images[idx][:, r0 : r0 + cfg.crop, c0 : c0 + cfg.crop]
            mask = masks[idx][r0 : r0 + cfg.crop, c0 : c0 + cfg.crop]
            if rng.random() < 0.5:
                img, mask = img[:, :, ::-1], mask[:, ::-1]
            if rng.random() < 0.5:
                img, mask = img[:, ::-1, :], mask[::-1, :]
            label = presence_from_mask(mask, cfg.min_presence)
            if label.n < 1:  # crop is fully ignore: nothing to learn from
                continue
            x = np.ascontiguousarray(img) - INPUT_OFFSET
            logits, cache = net.forward(x)
            samples.append(
                {"logits": logits, "cache": cache, "mask": np.ascontiguousarray(mask), "label": label}
            )
        lr = poly_lr(cfg.lr, it, cfg.iterations, cfg.poly_power)
        if not samples:
            curve.append((it, 0.0, lr))
            continue
        net.params.zero_grads()
        losses = _crop_losses(samples, cfg)
        mean_loss = float(np.mean([loss for loss, _ in losses]))
        if not np.isfinite(mean_loss):
            raise NumericError(
                f"non-finite segmentation loss {mean_loss!r} at iteration {it}, lr {lr:.6g}"
            )
        for sample, (_, d_logits) in zip(samples, losses):
            net.backward(sample["cache"], d_logits / len(samples))
        net.params.sgd_step(lr, MOMENTUM)
        curve.append((it, mean_loss, lr))
    return net, curve


# ---------------------------------------------------------------------------
# inference


def sliding_infer(
    net: SegNet, image: np.ndarray, crop: int, stride: int, scales
) -> np.ndarray:
    """Tiled multi-scale class probabilities for a full image.

    Per scale: resize, tile (crop clamped to the scaled extents), softmax per
    tile, stitch with overlap averaging, resize back. The scale mean is then
    renormalized so every pixel's probabilities sum to one.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("no scales given")
    if crop < net.min_input:
        raise ValueError(f"crop must be >= {net.min_input}")
    h, w = image.shape[1], image.shape[2]
    total = None
    used = 0
    for scale in scales:
        if scale <= 0:
            raise ValueError("scales must be positive")
        th, tw = int(round(h * scale)), int(round(w * scale))
        if min(th, tw) < net.min_input:
            warnings.warn(f"scale {scale} gives {th}x{tw}; skipped")
            continue
        scaled = image if (th, tw) == (h, w) else bilinear_resize(image, th, tw)
        crop_h, crop_w = min(crop, th), min(crop, tw)
        maps, offsets = [], []
        for row in grid_positions(th, crop_h, stride):
            for col in grid_positions(tw, crop_w, stride):
                tile = scaled[:, row : row + crop_h, col : col + crop_w] - INPUT_OFFSET
                logits, _ = net.forward(np.ascontiguousarray(tile))
                maps.append(softmax_channel(logits))
                offsets.append((row, col))
        merged = merge_patches(maps, offsets, th, tw)
        if merged.shape[1:] != (h, w):
            merged = bilinear_resize(merged, h, w)
        total = merged if total is None else total + merged
        used += 1
    if total is None:
        raise ValueError("all scales infeasible")
    probs = total / used
    return probs / probs.sum(axis=0, keepdims=True)


def predict_mask(net: SegNet, image: np.ndarray, crop: int, stride: int, scales) -> np.ndarray:
    return sliding_infer(net, image, crop, stride, scales).argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    """Overlap scores from global pixel counts over a whole mask set."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    class_iou: np.ndarray
    class_dice: np.ndarray
    class_f1: np.ndarray
    absent: np.ndarray  # classes missing from both predictions and truth
    miou: float = field(init=False)
    mean_dice: float = field(init=False)
    mean_f1: float = field(init=False)

    def __post_init__(self):
        self.miou = float(self.class_iou.mean())
        self.mean_dice = float(self.class_dice.mean())
        self.mean_f1 = float(self.class_f1.mean())

    def rows(self) -> list[dict]:
        out = []
        for c in range(len(self.class_iou)):
            out.append(
                {
                    "class": str(c),
                    "iou": f"{self.class_iou[c]:.6f}",
                    "dice": f"{self.class_dice[c]:.6f}",
                    "f1": f"{self.class_f1[c]:.6f}",
                    "tp": str(int(self.tp[c])),
                    "fp": str(int(self.fp[c])),
                    "fn": str(int(self.fn[c])),
                    "absent": "yes" if self.absent[c] else "no",
                }
            )
        out.append(
            {
                "class": "mean",
                "iou": f"{self.miou:.6f}",
                "dice": f"{self.mean_dice:.6f}",
                "f1": f"{self.mean_f1:.6f}",
                "tp": str(int(self.tp.sum())),
                "fp": str(int(self.fp.sum())),
                "fn": str(int(self.fn.sum())),
                "absent": "",
            }
        )
        return out

    def pretty(self) -> str:
        lines = ["class  IoU      Dice     F1(pixel)"]
        for c in range(len(self.class_iou)):
            flag = "  (absent: scored 1 by convention)" if self.absent[c] else ""
            lines.append(
                f"{c:<6d} {self.class_iou[c]:<8.4f} {self.class_dice[c]:<8.4f} "
                f"{self.class_f1[c]:<8.4f}{flag}"
            )
        lines.append(
            f"mean   {self.miou:<8.4f} {self.mean_dice:<8.4f} {self.mean_f1:<8.4f}"
        )
        return "\n".join(lines)


def evaluate(preds: list[np.ndarray], gts: list[np.ndarray], n_classes: int = 2) -> EvalReport:
    """Global-count IoU / Dice / pixel-F1. Ignore pixels in the ground truth
    are excluded; a class absent from both sides scores 1 and is flagged."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need matching, non-empty prediction and truth lists")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction and truth extents differ")
        valid = gt != IGNORE
        pv = pred[valid].astype(np.intp)
        gv = gt[valid].astype(np.intp)
        if pv.size and int(pv.max()) >= n_classes:
            raise ValueError("prediction holds an out-of-range class value")
        confusion += np.bincount(
            gv * n_classes + pv, minlength=n_classes * n_classes
        ).reshape(n_classes, n_classes)

    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    absent = (tp + fp + fn) == 0

    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / (tp + fp + fn)
        dice = 2 * tp / (2 * tp + fp + fn)
        # harmonic mean of global pixel precision tp/(tp+fp) and recall
        # tp/(tp+fn); over integer counts it reduces exactly to
        # 2tp / ((tp+fp) + (tp+fn)), which keeps it bit-equal to Dice
        f1 = 2 * tp / ((tp + fp) + (tp + fn))
    iou = np.where(absent, 1.0, np.nan_to_num(iou))
    dice = np.where(absent, 1.0, np.nan_to_num(dice))
    f1 = np.where(absent, 1.0, np.nan_to_num(f1))

    return EvalReport(
        tp=tp.astype(np.int64),
        fp=fp.astype(np.int64),
        fn=fn.astype(np.int64),
        class_iou=iou,
        class_dice=dice,
        class_f1=f1,
        absent=absent,
    )


# ---------------------------------------------------------------------------
# noise injection for the robustness experiments


def boundary_band(mask: np.ndarray, band_radius: int) -> np.ndarray:
    """Valid pixels within ``band_radius`` (Chebyshev) of a class boundary."""
    mask = np.asarray(mask)
    valid = mask != IGNORE
    band = np.zeros_like(valid)
    h, w = mask.shape
    for dr in range(-band_radius, band_radius + 1):
        for dc in range(-band_radius, band_radius + 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full_like(mask, IGNORE)
            rs = slice(max(dr, 0), h + min(dr, 0))
            rd = slice(max(-dr, 0), h + min(-dr, 0))
            cs = slice(max(dc, 0), w + min(dc, 0))
            cd = slice(max(-dc, 0), w + min(-dc, 0))
            shifted[rd, cd] = mask[rs, cs]
            band |= valid & (shifted != IGNORE) & (shifted != mask)
    return band


def corrupt_boundary(
    mask: np.ndarray,
    frac: float,
    rng: np.random.Generator,
    band_radius: int = 2,
    direction: int | None = None,
) -> np.ndarray:
    """Flip ``frac`` of the pixels lying within ``band_radius`` (Chebyshev) of
    a class boundary.

    The corruption mimics how weak masks fail: boundaries over- or
    under-shoot as a whole. ``direction`` is the class being swallowed by its
    neighbour (0 dilates class 1, 1 erodes it); None draws it per call. The
    flipped pixels form contiguous chunks of that side of the band, chosen by
    thresholding a smoothed random field, rather than salt-and-pepper.
    """
    if not (0.0 <= frac <= 1.0):
        raise ValueError("frac must be in [0, 1]")
    mask = np.asarray(mask)
    band = boundary_band(mask, band_radius)
    count = int(round(frac * band.sum()))
    source = int(rng.integers(2)) if direction is None else int(direction)
    field = _smooth_field(rng.standard_normal(mask.shape), max(2.0, float(band_radius)))
    if count == 0:
        return mask.copy()
    candidates = band & (mask == source)
    count = min(count, int(candidates.sum()))
    scores = np.where(candidates, field, -np.inf).ravel()
    chosen = np.argsort(-scores, kind="stable")[:count]
    out = mask.copy().ravel()
    out[chosen] = 1 - source
    return out.reshape(mask.shape)


def _smooth_field(field: np.ndarray, sigma: float) -> np.ndarray:
    from .synthdata import _smooth

    return _smooth(field, sigma)
