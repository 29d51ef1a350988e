"""Stage 1: patch classifier, class evidence maps, refined pseudo-masks.

The classifier is a three-stage encoder whose stage outputs are fused at
stage-1 resolution (the deeper stages are upsampled and concatenated) and
projected by a 1x1 classifier. Training pools the projected map globally;
evidence maps reuse the very same classifier weights without the pooling,
so spatial class evidence comes for free from the trained weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .encoder import MIN_INPUT, WIDTHS, Encoder
from .numerics import (
    NumericError,
    ParamStore,
    bilinear_resize,
    bilinear_resize_backward,
    make_rng,
)
from .synthdata import PatchLabel, grid_positions, merge_patches

INPUT_OFFSET = 0.5  # images in [0,1] are centered before entering a net
MOMENTUM = 0.9  # classic SGD momentum; the micro nets need it to converge


@dataclass
class ClassifierHp:
    lr: float = 0.01
    epochs: int = 20
    batch: int = 16
    poly_power: float = 0.9
    seed: int = 0


class ClassifierNet:
    """Multi-label patch classifier with a spatial-evidence head."""

    min_input = MIN_INPUT

    def __init__(self, in_channels: int = 3, n_classes: int = 2, seed: int = 0):
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.params = ParamStore()
        rng = make_rng(seed, "classifier-init")
        self.encoder = Encoder(self.params, in_channels, rng)
        fused = sum(WIDTHS)
        self.params.add("cls.weight", rng.standard_normal((n_classes, fused)) * 0.01)
        self.params.add("cls.bias", np.zeros(n_classes))

    def _fuse(self, stages):
        s1, s2, s3 = stages
        h, w = s1.shape[1], s1.shape[2]
        return np.concatenate(
            [s1, bilinear_resize(s2, h, w), bilinear_resize(s3, h, w)], axis=0
        )

    def project(self, fused: np.ndarray) -> np.ndarray:
        """Apply the 1x1 classifier to a fused feature map (no bias): the raw
        per-class evidence map."""
        return np.einsum("cf,fhw->chw", self.params.params["cls.weight"], fused)

    def forward_scores(self, x: np.ndarray):
        """Per-class logits for a centered patch, plus a backward cache."""
        stages, enc_cache = self.encoder.forward(x)
        fused = self._fuse(stages)
        evidence = self.project(fused)
        h, w = evidence.shape[1], evidence.shape[2]
        logits = evidence.mean(axis=(1, 2)) + self.params.params["cls.bias"]
        cache = {"stages": stages, "enc": enc_cache, "fused": fused, "hw": (h, w)}
        return logits, cache

    def backward_scores(self, cache, d_logits: np.ndarray) -> None:
        h, w = cache["hw"]
        fused = cache["fused"]
        d_evidence = np.broadcast_to(
            d_logits[:, None, None] / (h * w), (self.n_classes, h, w)
        )
        self.params.accumulate("cls.bias", d_logits)
        self.params.accumulate(
            "cls.weight", np.einsum("chw,fhw->cf", d_evidence, fused)
        )
        d_fused = np.einsum(
            "cf,chw->fhw", self.params.params["cls.weight"], d_evidence
        )
        w1, w2, w3 = WIDTHS
        s2, s3 = cache["stages"][1], cache["stages"][2]
        d_s1 = d_fused[:w1]
        d_s2 = bilinear_resize_backward(s2.shape[1], s2.shape[2], d_fused[w1 : w1 + w2])
        d_s3 = bilinear_resize_backward(s3.shape[1], s3.shape[2], d_fused[w1 + w2 :])
        self.encoder.backward(cache["enc"], [d_s1, d_s2, d_s3])

    def evidence(self, x: np.ndarray) -> np.ndarray:
        """Raw class evidence for a centered input, at stage-1 resolution."""
        stages, _ = self.encoder.forward(x)
        return self.project(self._fuse(stages))


def _bce_with_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean over classes of sigmoid binary cross-entropy, with gradient."""
    z, y = logits, targets
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (1.0 / (1.0 + np.exp(-z)) - y) / z.size
    return float(loss.mean()), grad


def _poly_lr(base: float, it: int, max_iter: int, power: float) -> float:
    if max_iter == 0:
        return base
    return base * (1.0 - it / max_iter) ** power


def train_classifier(
    patches: list[np.ndarray],
    labels: list[PatchLabel],
    hp: ClassifierHp,
) -> tuple[ClassifierNet, list[float]]:
    """SGD with polynomial lr decay on the multi-label objective; returns the
    trained net and the per-epoch mean loss curve."""
    if not patches:
        raise ValueError("no training patches")
    n_classes = len(labels[0].presence)
    seen = np.zeros(n_classes, dtype=bool)
    for label in labels:
        seen |= np.asarray(label.presence, dtype=bool)
    if not seen.all():
        raise ValueError("every class needs at least one positive patch")

    net = ClassifierNet(
        in_channels=patches[0].shape[0], n_classes=n_classes, seed=hp.seed
    )
    rng = make_rng(hp.seed, "classifier-train")
    targets = [np.asarray(l.presence, dtype=np.float64) for l in labels]

    steps_per_epoch = max(1, (len(patches) + hp.batch - 1) // hp.batch)
    max_iter = hp.epochs * steps_per_epoch
    curve: list[float] = []
    it = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(patches))
        epoch_losses = []
        for start in range(0, len(order), hp.batch):
            chunk = order[start : start + hp.batch]
            net.params.zero_grads()
            batch_loss = 0.0
            for idx in chunk:
                x = patches[idx] - INPUT_OFFSET
                if rng.random() < 0.5:
                    x = x[:, :, ::-1]
                if rng.random() < 0.5:
                    x = x[:, ::-1, :]
                logits, cache = net.forward_scores(np.ascontiguousarray(x))
                loss, d_logits = _bce_with_logits(logits, targets[idx])
                batch_loss += loss
                net.backward_scores(cache, d_logits / len(chunk))
            batch_loss /= len(chunk)
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite classifier loss {batch_loss!r} at iteration {it}, "
                    f"lr {_poly_lr(hp.lr, it, max_iter, hp.poly_power):.6g}"
                )
            net.params.sgd_step(_poly_lr(hp.lr, it, max_iter, hp.poly_power), MOMENTUM)
            epoch_losses.append(batch_loss)
            it += 1
        curve.append(float(np.mean(epoch_losses)))
    return net, curve


def multilabel_accuracy(
    net: ClassifierNet, patches: list[np.ndarray], labels: list[PatchLabel]
) -> float:
    """Fraction of presence bits predicted correctly (sigmoid > 0.5)."""
    hits = 0
    total = 0
    for patch, label in zip(patches, labels):
        logits, _ = net.forward_scores(patch - INPUT_OFFSET)
        pred = logits > 0.0
        hits += int((pred == np.asarray(label.presence, dtype=bool)).sum())
        total += pred.size
    return hits / total


# ---------------------------------------------------------------------------
# evidence maps and pseudo-masks


def compute_cam(net: ClassifierNet, image: np.ndarray) -> np.ndarray:
    """Raw class evidence upsampled to image resolution (no softmax)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] != net.in_channels:
        raise ValueError(
            f"channel mismatch: image has {image.shape[0]}, net expects {net.in_channels}"
        )
    evidence = net.evidence(image - INPUT_OFFSET)
    return bilinear_resize(evidence, image.shape[1], image.shape[2])


def minmax_normalize_channels(cam: np.ndarray) -> np.ndarray:
    """Scale each channel to [0, 1]; a zero-range channel collapses to 0."""
    lo = cam.min(axis=(1, 2), keepdims=True)
    hi = cam.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    return (cam - lo) / np.where(span > 0, span, 1.0)


def multiscale_cam(net: ClassifierNet, image: np.ndarray, scales) -> np.ndarray:
    """Mean class evidence over test scales, min-max normalized per channel.

    Scales whose resized extents fall below the net's minimum are skipped
    with a warning; if all scales are skipped this is an error.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("no scales given")
    h, w = image.shape[1], image.shape[2]
    total = None
    used = 0
    for scale in scales:
        if scale <= 0:
            raise ValueError("scales must be positive")
        th, tw = int(round(h * scale)), int(round(w * scale))
        if min(th, tw) < net.min_input:
            warnings.warn(
                f"scale {scale} gives {th}x{tw}, below the net minimum "
                f"{net.min_input}; skipped"
            )
            continue
        scaled = image if (th, tw) == (h, w) else bilinear_resize(image, th, tw)
        cam = compute_cam(net, scaled)
        if cam.shape[1:] != (h, w):
            cam = bilinear_resize(cam, h, w)
        total = cam if total is None else total + cam
        used += 1
    if total is None:
        raise ValueError("all scales were skipped")
    return minmax_normalize_channels(total / used)


def image_cam(
    net: ClassifierNet,
    image: np.ndarray,
    patch_side: int,
    patch_stride: int,
    scales,
) -> np.ndarray:
    """Full-image evidence: multi-scale evidence per tile, stitched back to
    the image extent with overlap averaging."""
    h, w = image.shape[1], image.shape[2]
    maps, offsets = [], []
    for row in grid_positions(h, patch_side, patch_stride):
        for col in grid_positions(w, patch_side, patch_stride):
            tile = image[:, row : row + patch_side, col : col + patch_side]
            maps.append(multiscale_cam(net, tile, scales))
            offsets.append((row, col))
    return merge_patches(maps, offsets, h, w)


def make_pseudomask(cam: np.ndarray, presence) -> np.ndarray:
    """Per-pixel argmax over the class dimension after suppressing channels
    of absent classes; ties resolve to the lowest class index."""
    presence = np.asarray(presence, dtype=bool)
    if presence.shape[0] != cam.shape[0]:
        raise ValueError("presence vector length does not match channels")
    if not presence.any():
        raise ValueError("all channels suppressed: no class asserted present")
    scores = np.where(presence[:, None, None], cam, -np.inf)
    return scores.argmax(axis=0).astype(np.uint8)


def aggregate_presence(labels: list[PatchLabel]) -> np.ndarray:
    """Union of patch-level presence vectors (image-level class presence)."""
    if not labels:
        raise ValueError("no labels to aggregate")
    out = np.zeros_like(np.asarray(labels[0].presence, dtype=bool))
    for label in labels:
        out |= np.asarray(label.presence, dtype=bool)
    return out
