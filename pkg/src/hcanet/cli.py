"""Command line entry point: synth / train / eval / predict / visualize.

Exit codes: 0 success, 2 usage error, 1 runtime error. Results go to stdout,
errors to stderr.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ConfigurationError, HcaNetError
from .evaluator import aggregate, format_table, report_to_json, score_batch
from .heatmap_codec import HeatmapStack, KeypointSet, decode_peaks
from .network import DOWNSAMPLE
from .spine_data import (
    NUM_DISCS,
    SpineSample,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    prepare_batch,
    read_image_file,
    read_keypoints_file,
    resize_image,
    save_dataset,
    split_train_val,
)
from .trainer import (
    config_to_flat_items,
    load_model_from_checkpoint,
    parse_config_file,
    train,
)

DEFAULT_THRESHOLD = 0.25


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcanet", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic spine dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", required=True, type=_positive_int, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractors", type=int, default=0, help="off-spine bright blobs per image")
    p.add_argument("--noise", type=float, default=0.02, help="additive Gaussian noise std")
    p.add_argument("--size", type=int, default=128, help="square image side in pixels")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_eval)

    for name in ("predict", "visualize"):
        p = sub.add_parser(name, help="predict disc positions for one image and render an overlay")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", required=True, help="input .img file")
        p.add_argument("--out", required=True, help="output prefix for .coords.csv and .overlay.png")
        p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
        p.add_argument("--keypoints", default=None, help="optional .keypoints.csv with ground truth")
        p.set_defaults(func=cmd_predict)

    return parser


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise HcaNetError(f"output directory {out} is not empty (use --force to overwrite)")
    if args.size < 56:
        raise ConfigurationError(f"--size must be >= 56 to fit 11 discs, got {args.size}")
    gap_hi = (args.size - 10.0) / 10.0
    config = SynthConfig(
        count=args.count,
        height=args.size,
        width=args.size,
        disc_gap_px=(0.8 * gap_hi, gap_hi),
        noise_std=args.noise,
        distractor_count=args.distractors,
        seed=args.seed,
    )
    samples = generate_synthetic(config)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = parse_config_file(args.config)
    samples = load_dataset(args.data)
    train_set, val_set = split_train_val(samples)
    print(f"data: {len(train_set)} train / {len(val_set)} val samples from {args.data}")
    print("effective config:")
    for key, value in config_to_flat_items(config).items():
        print(f"  {key} = {value}")
    report = train(config, train_set, val_set, args.out)
    print(
        f"final: val_loss={report.final_val_loss:.6g} "
        f"val_dtt_px={report.final_val_dtt_px:.4g} "
        f"val_fnr={report.final_val_fnr_pct:.2f} val_fpr={report.final_val_fpr_pct:.2f}"
    )
    print(f"checkpoints: {report.best_checkpoint} (best), {report.last_checkpoint} (last)")
    return 0


def cmd_eval(args) -> int:
    model, config = load_model_from_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    records = []
    with torch.no_grad():
        for start in range(0, len(samples), config.batch_size):
            chunk = samples[start : start + config.batch_size]
            images, _, keypoints, _ = prepare_batch(chunk, config.model, sigma=config.sigma_px)
            fused, _ = model(images)
            records.extend(
                score_batch(fused, keypoints, threshold=args.threshold, scale_to_image=DOWNSAMPLE)
            )
    report = aggregate(records)
    Path(args.report).write_text(report_to_json(report))
    print(format_table(report))
    return 0


def _load_prediction_input(args) -> SpineSample:
    image, spacing = read_image_file(Path(args.image))
    if args.keypoints is not None:
        keypoints = read_keypoints_file(Path(args.keypoints), spacing)
    else:
        keypoints = KeypointSet(
            np.full((NUM_DISCS, 2), -1.0), np.zeros(NUM_DISCS, dtype=bool), spacing_mm=spacing
        )
    return SpineSample(image, keypoints, subject_id=Path(args.image).stem)


def cmd_predict(args) -> int:
    model, config = load_model_from_checkpoint(args.checkpoint)
    sample = _load_prediction_input(args)

    canvas, scale, (off_r, off_c) = resize_image(sample.image, config.model.input_size)
    with torch.no_grad():
        fused, _ = model(torch.as_tensor(canvas, dtype=torch.float32).view(1, 1, *canvas.shape))
    stack = HeatmapStack(fused[0])
    detections = decode_peaks(stack, args.threshold)
    peaks = stack.values.amax(dim=(-2, -1)).numpy()

    # heatmap px -> network-input px -> original-image px
    coords_img = (detections.coords * DOWNSAMPLE - np.array([off_r, off_c])) / scale
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)

    lines = ["disc,row,col,confidence,visible"]
    for i in range(len(detections)):
        if detections.visible[i]:
            r, c = coords_img[i]
        else:
            r, c = -1.0, -1.0
        confidence = 1.0 / (1.0 + math.exp(-float(peaks[i])))  # display-only squash
        lines.append(f"{i},{r:.3f},{c:.3f},{confidence:.4f},{int(detections.visible[i])}")
    coords_path = Path(str(prefix) + ".coords.csv")
    coords_path.write_text("\n".join(lines) + "\n")

    overlay_path = Path(str(prefix) + ".overlay.png")
    _render_overlay(sample, coords_img, detections.visible, overlay_path)
    print(f"wrote {coords_path} and {overlay_path}")
    return 0


def _render_overlay(sample: SpineSample, coords_img: np.ndarray, visible: np.ndarray,
                    path: Path) -> None:
    base = Image.fromarray((sample.image * 255.0).round().astype(np.uint8), mode="L")
    canvas = base.convert("RGB")
    draw = ImageDraw.Draw(canvas)
    radius = max(2, round(min(sample.image.shape) / 64))
    for i in range(len(sample.keypoints)):
        if sample.keypoints.visible[i]:
            r, c = sample.keypoints.coords[i]
            draw.ellipse([c - radius, r - radius, c + radius, r + radius], outline=(0, 255, 0))
    for i in range(coords_img.shape[0]):
        if visible[i]:
            r, c = coords_img[i]
            draw.ellipse([c - radius, r - radius, c + radius, r + radius], outline=(255, 60, 60))
            draw.text((c + radius + 1, r - radius), str(i), fill=(255, 60, 60))
    canvas.save(path)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HcaNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
