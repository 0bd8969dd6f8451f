#!/usr/bin/env python3
"""Directional ablation: train with and without the skeleton loss on a fixed
synthetic set with distractor blobs, and compare summed FNR+FPR at the best
checkpoint across seeds. Archives every run's metrics in one JSON report.
"""

from __future__ import annotations

import argparse
import json
import tempfile
from pathlib import Path

import torch

from hcanet.evaluator import aggregate, score_batch
from hcanet.losses import LossConfig
from hcanet.network import DOWNSAMPLE, ModelConfig
from hcanet.spine_data import SynthConfig, generate_synthetic, prepare_batch
from hcanet.trainer import TrainConfig, load_model_from_checkpoint, train


def make_dataset(count=64, distractors=3, seed=123):
    return generate_synthetic(
        SynthConfig(
            count=count, height=64, width=64, disc_gap_px=(4.2, 5.0),
            noise_std=0.02, distractor_count=distractors, seed=seed,
        )
    )


def train_and_score(data, lambda_sk, seed, epochs, workdir) -> dict:
    config = TrainConfig(
        epochs=epochs,
        batch_size=4,
        learning_rate=2.5e-4,
        loss=LossConfig(lambda_sk=lambda_sk),
        model=ModelConfig(stacks=1, channels=8, hourglass_depth=2,
                          input_size=(64, 64), seed=seed),
        checkpoint_every=max(epochs, 1),
        seed=seed,
    )
    run_dir = Path(workdir) / f"lam{lambda_sk:g}_seed{seed}"
    train(config, data, data, run_dir)
    model, _ = load_model_from_checkpoint(run_dir / "best.ckpt")
    records = []
    with torch.no_grad():
        for start in range(0, len(data), 8):
            images, _, keypoints, _ = prepare_batch(data[start : start + 8], config.model)
            fused, _ = model(images)
            records.extend(score_batch(fused, keypoints, threshold=0.25, scale_to_image=DOWNSAMPLE))
    report = aggregate(records)
    return {
        "lambda_sk": lambda_sk,
        "seed": seed,
        "epochs": epochs,
        "fnr_pct": report.fnr_pct,
        "fpr_pct": report.fpr_pct,
        "fnr_plus_fpr": report.fnr_pct + report.fpr_pct,
        "dtt_mean_mm": report.dtt_mean_mm,
        "dtt_std_mm": report.dtt_std_mm,
    }


def run_ablation(seeds=(0, 1, 2), epochs=30, lambda_sk=2e-4, count=64, distractors=3,
                 data_seed=123, workdir=None) -> dict:
    data = make_dataset(count=count, distractors=distractors, seed=data_seed)
    created = None
    if workdir is None:
        created = tempfile.TemporaryDirectory()
        workdir = created.name
    runs = []
    wins = 0
    try:
        for seed in seeds:
            with_sk = train_and_score(data, lambda_sk, seed, epochs, workdir)
            without_sk = train_and_score(data, 0.0, seed, epochs, workdir)
            improved = with_sk["fnr_plus_fpr"] <= without_sk["fnr_plus_fpr"]
            wins += int(improved)
            runs.append({"seed": seed, "with_skeleton": with_sk,
                         "without_skeleton": without_sk, "improved_or_tied": improved})
    finally:
        if created is not None:
            created.cleanup()
    return {
        "dataset": {"count": count, "distractors": distractors, "seed": data_seed},
        "epochs": epochs,
        "lambda_sk": lambda_sk,
        "seeds": list(seeds),
        "runs": runs,
        "improved_or_tied_count": wins,
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output JSON report path")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--count", type=int, default=64)
    parser.add_argument("--distractors", type=int, default=3)
    parser.add_argument("--workdir", default=None, help="keep run directories here")
    args = parser.parse_args(argv)

    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = run_ablation(seeds=seeds, epochs=args.epochs, count=args.count,
                          distractors=args.distractors, workdir=args.workdir)
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    for run in report["runs"]:
        a, b = run["with_skeleton"], run["without_skeleton"]
        print(
            f"seed {run['seed']}: FNR+FPR {a['fnr_plus_fpr']:.2f} (with) vs "
            f"{b['fnr_plus_fpr']:.2f} (without) -> {'<=' if run['improved_or_tied'] else '>'}"
        )
    print(f"improved or tied in {report['improved_or_tied_count']}/{len(seeds)} seeds")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
