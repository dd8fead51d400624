"""Per-LOD PSNR and render time for a trained checkpoint.

    python3 scripts/lod_timing.py runs/standard/final.ckpt
"""
import argparse
from pathlib import Path

from pigavatar.experiments import obtain_dataset
from pigavatar.trainer import evaluate, load_checkpoint, prepare_data, time_render


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--dataset", type=Path)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    state = load_checkpoint(args.checkpoint)
    _, ds = obtain_dataset(state.cfg, args.dataset)
    data = prepare_data(ds, state.cfg)
    print("lod  splats  psnr    ms/frame")
    for lod in range(1, state.anchors.num_lods + 1):
        m = evaluate(state, data, "novel_view", lod)
        t = time_render(state, data, lod, args.repeats)
        print(f"{lod:>3}  {m['splats']:>6}  {m['psnr']:6.2f}  {1e3 * t:8.1f}")


if __name__ == "__main__":
    main()
