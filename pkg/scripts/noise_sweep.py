"""Pose-noise robustness: train from perturbed pose initialisations with body refinement on.

    python3 scripts/noise_sweep.py --out runs/noise --sigma 0 --sigma 0.1 --sigma 0.25
"""
import argparse
import logging
from pathlib import Path

from pigavatar.config import ExperimentConfig, apply_overrides
from pigavatar.experiments import NOISE_LEVELS, markdown_table, obtain_dataset, run_noise_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/noise"))
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--dataset", type=Path)
    ap.add_argument("--sigma", type=float, action="append")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = apply_overrides(ExperimentConfig(), [("train.iterations", args.iterations), ("train.log_every", 100)])
    cfg, ds = obtain_dataset(cfg, args.dataset)
    rows = run_noise_sweep(cfg, ds, args.out, args.sigma or NOISE_LEVELS)
    print(markdown_table(rows, ["sigma", "psnr", "ssim", "final_loss", "stable"]))


if __name__ == "__main__":
    main()
