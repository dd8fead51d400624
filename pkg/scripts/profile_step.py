"""Profile training steps on the standard scene and print the hottest functions.

    python3 scripts/profile_step.py --steps 20
"""
import argparse
import cProfile
import pstats
import time

from pigavatar.config import ExperimentConfig
from pigavatar.synth import generate
from pigavatar.trainer import init_state, prepare_data, train_step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--top", type=int, default=25)
    args = ap.parse_args()
    cfg = ExperimentConfig()
    data = prepare_data(generate(cfg.scene), cfg)
    state = init_state(cfg, data)
    train_step(state, data)  # compile the kernels
    t0 = time.perf_counter()
    for _ in range(args.steps):
        train_step(state, data)
    print(f"{(time.perf_counter() - t0) / args.steps:.3f} s per step")
    prof = cProfile.Profile()
    prof.runcall(lambda: [train_step(state, data) for _ in range(args.steps)])
    pstats.Stats(prof).sort_stats("tottime").print_stats(args.top)


if __name__ == "__main__":
    main()
