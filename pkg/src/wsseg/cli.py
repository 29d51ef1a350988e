"""Batch front-end: reproducible experiments driven by a key=value config.

Subcommands: synth, pseudo, train, ablate, gradcheck. Every command is a
pure function of (config, flags, seed) to on-disk bytes; the fully resolved
configuration is echoed to <out>/config.resolved and can be fed back in.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import campseudo, segpipeline, synthdata
from .checks import gradient_report
from .mining import MODE_NAMES, MiningMode
from .numerics import NumericError, derive_seed, make_rng


class ConfigError(ValueError):
    """Bad configuration or missing prerequisite artifacts."""


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data_dir": "data",
    "out_dir": "out",
    "synth_train": 20,
    "synth_test": 20,
    "synth_side": 96,
    "synth_contrast": 0.15,
    "synth_smoothness": 12.0,
    "patch_side": 24,
    "patch_stride": 12,
    "min_presence": 0.01,
    "cls_lr": 0.01,
    "cls_epochs": 20,
    "cls_batch": 16,
    "cls_poly_power": 0.9,
    "cam_scales": (1.0, 1.25, 1.5, 1.75, 2.0),
    "cam_dump": False,
    "seg_lr": 0.005,
    "seg_iterations": 200,
    "seg_batch": 4,
    "seg_poly_power": 0.9,
    "seg_crop": 48,
    "mining": "none",
    "ohem_keep": 0.25,
    "norm_scope": "crop",
    "infer_crop": 64,
    "infer_stride": 48,
    "infer_scales": (0.75, 1.0, 1.25),
    "noise_boundary_frac": 0.0,
    "noise_band_radius": 2,
    "noise_direction": "dilate",
    "supervision": "pseudo",
    "ablate_seeds": 5,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r} expects true/false, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(part) for part in raw.split(",") if part.strip())
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def load_config(path: str | None) -> dict:
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    for lineno, line in enumerate(file.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{file}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{file}:{lineno}: unknown config key {key!r}")
        try:
            cfg[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{file}:{lineno}: bad value for {key!r}: {exc}") from None
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["mining"] not in MODE_NAMES:
        raise ConfigError(f"invalid mining mode {cfg['mining']!r}; valid: {MODE_NAMES}")
    if cfg["supervision"] not in ("pseudo", "gt"):
        raise ConfigError("supervision must be 'pseudo' or 'gt'")
    if cfg["norm_scope"] not in ("crop", "batch"):
        raise ConfigError("norm_scope must be 'crop' or 'batch'")
    if not (0 < cfg["min_presence"] <= 0.5):
        raise ConfigError("min_presence must be in (0, 0.5]")
    if cfg["ablate_seeds"] < 1:
        raise ConfigError("ablate_seeds must be >= 1")
    if not (0.0 <= cfg["noise_boundary_frac"] <= 1.0):
        raise ConfigError("noise_boundary_frac must be in [0, 1]")
    if cfg["noise_direction"] not in ("dilate", "erode", "per_image"):
        raise ConfigError("noise_direction must be dilate, erode, or per_image")
    if cfg["synth_side"] < 4 * cfg["patch_side"]:
        raise ConfigError("synth_side must be at least 4x patch_side")


def write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)


def _write_eval(path: Path, report: segpipeline.EvalReport) -> None:
    _write_csv(
        path, ["class", "iou", "dice", "f1", "tp", "fp", "fn", "absent"], report.rows()
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, force: bool) -> int:
    data_dir = Path(cfg["data_dir"])
    if data_dir.exists() and any(data_dir.iterdir()) and not force:
        raise ConfigError(
            f"dataset directory {data_dir} is not empty; pass --force to overwrite"
        )
    synth_cfg = synthdata.SynthConfig(
        train_count=cfg["synth_train"],
        test_count=cfg["synth_test"],
        side=cfg["synth_side"],
        contrast=cfg["synth_contrast"],
        smoothness=cfg["synth_smoothness"],
        seed=cfg["seed"],
    )
    try:
        synth_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = synthdata.generate_dataset(synth_cfg)
    synthdata.write_dataset(ds, data_dir)

    records = []
    for idx, (image, mask) in enumerate(zip(ds.train_images, ds.train_masks)):
        for _, rec in synthdata.crop_patches(
            image,
            mask,
            cfg["patch_side"],
            cfg["patch_stride"],
            cfg["min_presence"],
            image_id=f"{idx:03d}",
        ):
            records.append(rec)
    synthdata.write_patches_csv(data_dir / "patches.csv", records)

    write_resolved(cfg, Path(cfg["out_dir"]))
    all_masks = ds.train_masks + ds.test_masks
    gland = sum(int((m == 1).sum()) for m in all_masks)
    total = sum(m.size for m in all_masks)
    multi = sum(1 for r in records if r.label.n > 1)
    print(f"wrote {len(ds.train_images)} train / {len(ds.test_images)} test images to {data_dir}")
    print(f"gland pixel fraction: {gland / total:.3f}")
    print(f"patches: {len(records)} total, {multi} with both classes")
    return 0


def _load_train_patches(cfg: dict, images: list, ids: list[str]):
    data_dir = Path(cfg["data_dir"])
    csv_path = data_dir / "patches.csv"
    if not csv_path.is_file():
        raise ConfigError(f"missing {csv_path}; run the synth command first")
    by_id = {img_id: image for img_id, image in zip(ids, images)}
    records = synthdata.read_patches_csv(csv_path)
    patches, labels = [], []
    for rec in records:
        image = by_id[rec.image_id]
        patches.append(
            image[:, rec.row : rec.row + rec.side, rec.col : rec.col + rec.side]
        )
        labels.append(rec.label)
    return records, patches, labels


def cmd_pseudo(cfg: dict) -> int:
    data_dir = Path(cfg["data_dir"])
    out_dir = Path(cfg["out_dir"])
    try:
        ids, images, masks = synthdata.load_split(data_dir, "train")
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run the synth command first") from None
    records, patches, labels = _load_train_patches(cfg, images, ids)

    hp = campseudo.ClassifierHp(
        lr=cfg["cls_lr"],
        epochs=cfg["cls_epochs"],
        batch=cfg["cls_batch"],
        poly_power=cfg["cls_poly_power"],
        seed=derive_seed(cfg["seed"], "classifier"),
    )
    net, curve = campseudo.train_classifier(patches, labels, hp)
    _write_csv(
        out_dir / "cls_loss.csv",
        ["epoch", "loss"],
        [{"epoch": str(i), "loss": repr(v)} for i, v in enumerate(curve)],
    )
    accuracy = campseudo.multilabel_accuracy(net, patches, labels)
    print(f"classifier: {len(patches)} patches, bit accuracy {accuracy:.3f}")

    presence_by_id: dict[str, list] = {}
    for rec in records:
        presence_by_id.setdefault(rec.image_id, []).append(rec.label)

    pseudo_dir = out_dir / "pseudo"
    pseudo_dir.mkdir(parents=True, exist_ok=True)
    pseudo_masks = []
    for img_id, image in zip(ids, images):
        cam = campseudo.image_cam(
            net, image, cfg["patch_side"], cfg["patch_stride"], cfg["cam_scales"]
        )
        presence = campseudo.aggregate_presence(presence_by_id[img_id])
        pseudo = campseudo.make_pseudomask(cam, presence)
        synthdata.write_mask(pseudo_dir / f"{img_id}.png", pseudo)
        pseudo_masks.append(pseudo)
        if cfg["cam_dump"]:
            cam_dir = out_dir / "cam"
            cam_dir.mkdir(parents=True, exist_ok=True)
            for ch in range(cam.shape[0]):
                synthdata.write_mask(
                    cam_dir / f"{img_id}_c{ch}.png",
                    np.round(cam[ch] * 255.0).astype(np.uint8),
                )

    report = segpipeline.evaluate(pseudo_masks, masks)
    _write_eval(out_dir / "pseudo_eval.csv", report)
    print(f"pseudo-mask train mIoU: {report.miou:.4f}")
    write_resolved(cfg, out_dir)
    return 0


def _load_supervision(cfg: dict, ids: list[str], gt_masks: list, seed: int):
    """Training masks for one run: clean GT, or pseudo-masks with optional
    boundary noise (the noise knob only touches pseudo supervision)."""
    if cfg["supervision"] == "gt":
        return gt_masks
    pseudo_dir = Path(cfg["out_dir"]) / "pseudo"
    if not pseudo_dir.is_dir():
        raise ConfigError(f"missing {pseudo_dir}; run the pseudo command first")
    masks = [synthdata.read_mask(pseudo_dir / f"{img_id}.png") for img_id in ids]
    frac = cfg["noise_boundary_frac"]
    if frac > 0:
        direction = {"dilate": 0, "erode": 1, "per_image": None}[cfg["noise_direction"]]
        masks = [
            segpipeline.corrupt_boundary(
                mask,
                frac,
                make_rng(seed, "noise", idx),
                cfg["noise_band_radius"],
                direction,
            )
            for idx, mask in enumerate(masks)
        ]
    return masks


def _run_seg(cfg: dict, seed: int, mining: str, train_images, sup_masks, test_images, test_masks):
    train_cfg = segpipeline.TrainConfig(
        lr=cfg["seg_lr"],
        iterations=cfg["seg_iterations"],
        batch=cfg["seg_batch"],
        poly_power=cfg["seg_poly_power"],
        crop=cfg["seg_crop"],
        seed=derive_seed(seed, "seg"),
        mining=MiningMode(mining),
        ohem_keep=cfg["ohem_keep"],
        norm_scope=cfg["norm_scope"],
        min_presence=cfg["min_presence"],
    )
    net, curve = segpipeline.train_seg(train_images, sup_masks, train_cfg)
    preds = [
        segpipeline.predict_mask(
            net, image, cfg["infer_crop"], cfg["infer_stride"], cfg["infer_scales"]
        )
        for image in test_images
    ]
    report = segpipeline.evaluate(preds, test_masks)
    return net, curve, preds, report


def cmd_train(cfg: dict) -> int:
    data_dir = Path(cfg["data_dir"])
    out_dir = Path(cfg["out_dir"])
    try:
        train_ids, train_images, train_masks = synthdata.load_split(data_dir, "train")
        _, test_images, test_masks = synthdata.load_split(data_dir, "test")
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run the synth command first") from None
    sup_masks = _load_supervision(cfg, train_ids, train_masks, cfg["seed"])

    _, curve, preds, report = _run_seg(
        cfg, cfg["seed"], cfg["mining"], train_images, sup_masks, test_images, test_masks
    )
    _write_csv(
        out_dir / "seg_loss.csv",
        ["iteration", "loss", "lr"],
        [
            {"iteration": str(i), "loss": repr(l), "lr": repr(r)}
            for i, l, r in curve
        ],
    )
    pred_dir = out_dir / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for idx, pred in enumerate(preds):
        synthdata.write_mask(pred_dir / f"{idx:03d}.png", pred)
    _write_eval(out_dir / "eval.csv", report)
    print(f"mining={cfg['mining']} supervision={cfg['supervision']}")
    print(report.pretty())
    write_resolved(cfg, out_dir)
    return 0


def cmd_ablate(cfg: dict) -> int:
    data_dir = Path(cfg["data_dir"])
    out_dir = Path(cfg["out_dir"])
    try:
        train_ids, train_images, train_masks = synthdata.load_split(data_dir, "train")
        _, test_images, test_masks = synthdata.load_split(data_dir, "test")
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run the synth command first") from None

    rows = []
    scores: dict[str, list] = {name: [] for name in MODE_NAMES}
    for k in range(cfg["ablate_seeds"]):
        seed = cfg["seed"] + k
        sup_masks = _load_supervision(cfg, train_ids, train_masks, seed)
        for mode in MODE_NAMES:
            _, _, preds, report = _run_seg(
                cfg, seed, mode, train_images, sup_masks, test_images, test_masks
            )
            rows.append(
                {
                    "mode": mode,
                    "seed": str(seed),
                    "miou": f"{report.miou:.6f}",
                    "dice": f"{report.mean_dice:.6f}",
                    "f1": f"{report.mean_f1:.6f}",
                }
            )
            scores[mode].append((report.miou, report.mean_dice, report.mean_f1))
            pred_dir = out_dir / "ablate" / mode / f"seed{seed}" / "pred"
            pred_dir.mkdir(parents=True, exist_ok=True)
            for idx, pred in enumerate(preds):
                synthdata.write_mask(pred_dir / f"{idx:03d}.png", pred)
            print(f"seed {seed} mode {mode:<7s} mIoU {report.miou:.4f}")

    _write_csv(out_dir / "ablate.csv", ["mode", "seed", "miou", "dice", "f1"], rows)
    summary = [
        {
            "mode": mode,
            "median_miou": f"{np.median([s[0] for s in scores[mode]]):.6f}",
            "median_dice": f"{np.median([s[1] for s in scores[mode]]):.6f}",
            "median_f1": f"{np.median([s[2] for s in scores[mode]]):.6f}",
        }
        for mode in MODE_NAMES
    ]
    _write_csv(
        out_dir / "ablate_summary.csv",
        ["mode", "median_miou", "median_dice", "median_f1"],
        summary,
    )
    print("median mIoU per mode:")
    for row in summary:
        print(f"  {row['mode']:<7s} {row['median_miou']}")
    write_resolved(cfg, out_dir)
    return 0


def cmd_gradcheck(tolerance: float) -> int:
    entries = gradient_report()
    worst = 0.0
    for name, err in entries:
        status = "ok" if err <= tolerance else "FAIL"
        print(f"{name:<24s} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    if worst > tolerance:
        print(f"worst error {worst:.3e} exceeds tolerance {tolerance:.3e}")
        return 2
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on validation problems, not argparse's 2
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="wsseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, mining=False, supervision=False, force=False):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if mining:
            p.add_argument("--mining", choices=MODE_NAMES, default=None)
        if supervision:
            p.add_argument("--supervision", choices=("pseudo", "gt"), default=None)
        if force:
            p.add_argument("--force", action="store_true")

    common(sub.add_parser("synth", help="generate the synthetic dataset"), force=True)
    common(sub.add_parser("pseudo", help="train the patch classifier and write pseudo-masks"))
    common(
        sub.add_parser("train", help="train segmentation and evaluate on the test split"),
        mining=True,
        supervision=True,
    )
    common(sub.add_parser("ablate", help="run every mining mode over several seeds"))
    grad = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    grad.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    if getattr(args, "mining", None) is not None:
        cfg["mining"] = args.mining
    if getattr(args, "supervision", None) is not None:
        cfg["supervision"] = args.supervision
    _validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.tolerance)
        cfg = _resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg, args.force)
        if args.command == "pseudo":
            return cmd_pseudo(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_ablate(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
