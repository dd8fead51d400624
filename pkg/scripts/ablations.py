"""Structural ablation matrix on the standard scene (same seed and budget for every variant).

    python3 scripts/ablations.py --out runs/ablation --iterations 1500
"""
import argparse
import logging
from pathlib import Path

from pigavatar.config import ExperimentConfig, apply_overrides
from pigavatar.experiments import markdown_table, obtain_dataset, run_ablations
from pigavatar.trainer import ABLATIONS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--iterations", type=int, default=1500)
    ap.add_argument("--dataset", type=Path)
    ap.add_argument("--variant", action="append", choices=list(ABLATIONS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = apply_overrides(ExperimentConfig(), [("train.iterations", args.iterations), ("train.log_every", 100)])
    cfg, ds = obtain_dataset(cfg, args.dataset)
    rows = run_ablations(cfg, ds, args.out, args.variant)
    print(markdown_table(rows, ["variant", "psnr", "ssim", "drop"]))


if __name__ == "__main__":
    main()
