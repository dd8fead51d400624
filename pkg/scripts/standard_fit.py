"""Train the standard synthetic scene and report PSNR per split and LOD plus render timings.

    python3 scripts/standard_fit.py --out runs/standard [--iterations 3000]
"""
import argparse
import logging
import time
from pathlib import Path

from pigavatar.config import ExperimentConfig, apply_overrides
from pigavatar.experiments import obtain_dataset, run_training
from pigavatar.trainer import evaluate, init_state, prepare_data, time_render


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/standard"))
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--dataset", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = apply_overrides(ExperimentConfig(), [("train.iterations", args.iterations), ("train.seed", args.seed),
                                               ("train.log_every", 100), ("train.checkpoint_every", 500),
                                               ("train.preview_every", 500)])
    cfg, ds = obtain_dataset(cfg, args.dataset)
    data = prepare_data(ds, cfg)
    init = evaluate(init_state(cfg, data), data, "novel_view")["psnr"]
    t0 = time.perf_counter()
    state, data, _, metrics = run_training(cfg, ds, args.out)
    minutes = (time.perf_counter() - t0) / 60
    print(f"initial novel-view PSNR {init:.2f} dB; trained {state.step} iterations in {minutes:.1f} min")
    for m in metrics:
        print(f"{m['split']:>10} lod {m['lod']}: psnr {m['psnr']:.2f} ssim {m['ssim']:.4f} splats {m['splats']}")
    for lod in range(1, state.anchors.num_lods + 1):
        print(f"lod {lod}: {1e3 * time_render(state, data, lod):.1f} ms per frame (held-out views)")


if __name__ == "__main__":
    main()
