"""Synthetic two-class gland-like dataset plus patch tiling and disk io.

Images are smoothed-noise blob fields: one tissue class sits on the other
with the same texture statistics and only a small intensity gap between the
class means, so the classes are morphologically alike and learnable only
through that gap. Masks use 0 = non-gland, 1 = gland, 255 = ignore.

On-disk layout written by ``write_dataset``::

    <root>/{train,test}/{images,masks}/NNN.png
    <root>/patches.csv        # training patches: image_id,row,col,side,label_bits
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .numerics import make_rng

IGNORE = 255
N_CLASSES = 2


@dataclass(frozen=True)
class SynthConfig:
    train_count: int = 20
    test_count: int = 20
    side: int = 96
    n_classes: int = 2
    contrast: float = 0.15
    smoothness: float = 12.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes != 2:
            raise ValueError("generator is binary: n_classes must be 2")
        if not (0.0 < self.contrast <= 1.0):
            raise ValueError("contrast must be in (0, 1]")
        if self.side < 8:
            raise ValueError("side must be >= 8")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("image counts must be >= 1")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")


@dataclass(eq=False)
class PatchLabel:
    """Multi-hot class presence for one patch; ``n`` counts present classes."""

    presence: np.ndarray
    n: int

    @property
    def bits(self) -> int:
        return int(sum(1 << c for c, on in enumerate(self.presence) if on))

    @classmethod
    def from_bits(cls, bits: int, n_classes: int = N_CLASSES) -> "PatchLabel":
        presence = np.array([(bits >> c) & 1 == 1 for c in range(n_classes)])
        return cls(presence=presence, n=int(presence.sum()))


@dataclass
class PatchRecord:
    image_id: str
    row: int
    col: int
    side: int
    label: PatchLabel


@dataclass
class SynthDataset:
    train_images: list
    train_masks: list
    test_images: list
    test_masks: list


def presence_from_mask(
    mask: np.ndarray, min_presence: float, n_classes: int = N_CLASSES
) -> PatchLabel:
    """Label a mask region: class c is present iff it covers >= min_presence
    of the non-ignore pixels. All-ignore regions get n = 0."""
    valid = mask != IGNORE
    total = int(valid.sum())
    presence = np.zeros(n_classes, dtype=bool)
    if total == 0:
        return PatchLabel(presence=presence, n=0)
    counts = np.bincount(mask[valid].astype(np.intp), minlength=n_classes)
    presence = counts / total >= min_presence
    return PatchLabel(presence=presence, n=int(presence.sum()))


# ---------------------------------------------------------------------------
# generation


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()

def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    kernel = _gaussian_kernel(sigma)
    radius = len(kernel) // 2
    for axis in (0, 1):
        moved = np.moveaxis(field, axis, 0)
        padded = np.pad(moved, ((radius, radius), (0, 0)), mode="reflect")
        win = sliding_window_view(padded, len(kernel), axis=0)
        moved = np.einsum("hwk,k->hw", win, kernel)
        field = np.moveaxis(moved, 0, axis)
    return field


def _make_image(rng: np.random.Generator, cfg: SynthConfig):
    side = cfg.side
    for _ in range(100):
        blob = _smooth(rng.standard_normal((side, side)), cfg.smoothness)
        quantile = rng.uniform(0.35, 0.65)
        mask = (blob > np.quantile(blob, quantile)).astype(np.uint8)
        frac = mask.mean()
        if 0.3 <= frac <= 0.7 and 0 < mask.sum() < mask.size:
            break
    else:  # pragma: no cover - quantile split cannot run dry in practice
        raise RuntimeError("could not sample a balanced mask")

    mean_low = 0.5 - cfg.contrast / 2.0
    mean_high = 0.5 + cfg.contrast / 2.0
    # texture amplitude leaves room for per-class recentering, so pixel
    # values stay inside [0, 1] without clipping and the class means are
    # exactly mean_low / mean_high
    amp = min(0.08, mean_low / 2.0)
    image = np.empty((3, side, side))
    for ch in range(3):
        texture = _smooth(rng.standard_normal((side, side)), max(1.0, cfg.smoothness / 4.0))
        peak = np.abs(texture).max()
        if peak > 0:
            texture = texture / peak
        for cls, base in ((0, mean_low), (1, mean_high)):
            sel = mask == cls
            part = texture[sel]
            image[ch][sel] = base + amp * (part - part.mean())
    return image, mask


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    """Deterministically generate train/test images and masks for ``cfg``."""
    cfg.validate()
    images, masks = [], []
    total = cfg.train_count + cfg.test_count
    for idx in range(total):
        rng = make_rng(cfg.seed, "synth", idx)
        image, mask = _make_image(rng, cfg)
        images.append(image)
        masks.append(mask)
    return SynthDataset(
        train_images=images[: cfg.train_count],
        train_masks=masks[: cfg.train_count],
        test_images=images[cfg.train_count :],
        test_masks=masks[cfg.train_count :],
    )


# ---------------------------------------------------------------------------
# patch tiling


def grid_positions(extent: int, side: int, stride: int) -> list[int]:
    """Tiling offsets; the last one is clamped so the final patch touches
    the border instead of padding past it."""
    if side > extent:
        raise ValueError(f"patch side {side} exceeds extent {extent}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    positions = list(range(0, extent - side + 1, stride))
    if positions[-1] != extent - side:
        positions.append(extent - side)
    return positions


def crop_patches(
    image: np.ndarray,
    mask: np.ndarray,
    side: int,
    stride: int,
    min_presence: float = 0.01,
    image_id: str = "0",
) -> list[tuple[np.ndarray, PatchRecord]]:
    """Tile an image into labelled patches; patches with no qualifying class
    (all ignore) are dropped."""
    h, w = mask.shape
    out = []
    for row in grid_positions(h, side, stride):
        for col in grid_positions(w, side, stride):
            patch = image[:, row : row + side, col : col + side]
            label = presence_from_mask(
                mask[row : row + side, col : col + side], min_presence
            )
            if label.n < 1:
                continue
            out.append((patch, PatchRecord(image_id, row, col, side, label)))
    return out


def merge_patches(
    maps: list[np.ndarray],
    offsets: list[tuple[int, int]],
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """Stitch CHW patch maps back to (C, out_h, out_w), averaging overlaps."""
    if not maps:
        raise ValueError("no patches to merge")
    channels = maps[0].shape[0]
    acc = np.zeros((channels, out_h, out_w))
    coverage = np.zeros((out_h, out_w))
    for patch, (row, col) in zip(maps, offsets):
        if patch.shape[0] != channels:
            raise ValueError("inconsistent channel counts across patches")
        ph, pw = patch.shape[1], patch.shape[2]
        if row < 0 or col < 0 or row + ph > out_h or col + pw > out_w:
            raise ValueError(f"patch at ({row}, {col}) falls outside the output")
        acc[:, row : row + ph, col : col + pw] += patch
        coverage[row : row + ph, col : col + pw] += 1.0
    if (coverage == 0).any():
        raise ValueError("incomplete coverage: some pixels received no patch")
    return acc / coverage


# ---------------------------------------------------------------------------
# disk io


def write_image(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a (3,H,W) float map in [0, 1]."""
    arr = np.round(np.asarray(image) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    """Single-channel PNG holding raw class indices (255 = ignore)."""
    Image.fromarray(np.asarray(mask).astype(np.uint8), mode="L").save(path)


def read_mask(path, n_classes: int = N_CLASSES) -> np.ndarray:
    mask = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    bad = (mask >= n_classes) & (mask != IGNORE)
    if bad.any():
        value = int(mask[bad][0])
        raise ValueError(f"mask {path} holds invalid class value {value}")
    return mask


def write_dataset(ds: SynthDataset, root) -> None:
    root = Path(root)
    for split, images, masks in (
        ("train", ds.train_images, ds.train_masks),
        ("test", ds.test_images, ds.test_masks),
    ):
        img_dir = root / split / "images"
        mask_dir = root / split / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for idx, (image, mask) in enumerate(zip(images, masks)):
            name = f"{idx:03d}.png"
            write_image(img_dir / name, image)
            write_mask(mask_dir / name, mask)


def load_split(root, split: str):
    """Read one split back as (ids, images, masks), sorted by id."""
    img_dir = Path(root) / split / "images"
    mask_dir = Path(root) / split / "masks"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing dataset directory {img_dir}")
    ids = sorted(p.stem for p in img_dir.glob("*.png"))
    images = [read_image(img_dir / f"{i}.png") for i in ids]
    masks = [read_mask(mask_dir / f"{i}.png") for i in ids]
    return ids, images, masks


def write_patches_csv(path, records: list[PatchRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["image_id", "row", "col", "side", "label_bits"])
        for rec in records:
            writer.writerow([rec.image_id, rec.row, rec.col, rec.side, rec.label.bits])


def read_patches_csv(path, n_classes: int = N_CLASSES) -> list[PatchRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            records.append(
                PatchRecord(
                    image_id=row["image_id"],
                    row=int(row["row"]),
                    col=int(row["col"]),
                    side=int(row["side"]),
                    label=PatchLabel.from_bits(int(row["label_bits"]), n_classes),
                )
            )
    return records
