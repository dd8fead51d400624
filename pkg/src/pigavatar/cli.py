"""``pigavatar`` command line: synth, train, eval, render, export-ply, ablate, noise-sweep."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .anchor_graph import write_ply
from .config import ExperimentConfig, load_config, parse_assignments, save_config
from .experiments import (NOISE_LEVELS, SPLITS, obtain_dataset, resume_training, run_ablations, run_noise_sweep,
                          run_training)
from .render import save_png
from .synth import save_dataset
from .trainer import (ABLATIONS, METRIC_FIELDS, evaluate, export_splats, load_checkpoint, prepare_data,
                      render_frame, split_members, write_csv)

log = logging.getLogger("pigavatar")


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", type=Path, help="TOML file with [scene], [model] and [train] sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (the scene seed for synth, the training seed otherwise)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--workers", type=int, help="worker count (recorded; computation runs in this process)")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pigavatar", description="Anchor-based animatable avatars on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    _common(p)

    p = sub.add_parser("train", help="train on a dataset (synthesised when --dataset is omitted)")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")

    p = sub.add_parser("eval", help="write metrics.csv for a checkpoint")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--lod", type=int, help="single LOD (default: every LOD)")
    p.add_argument("--split", choices=[*SPLITS, "train"], action="append")

    p = sub.add_parser("render", help="render held-out views or poses at one LOD and timestep")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--lod", type=int)
    p.add_argument("--frame", type=int, default=0, help="0-based timestep")
    p.add_argument("--split", choices=[*SPLITS, "train"], default="novel_view")

    p = sub.add_parser("export-ply", help="dump posed or canonical splats as PLY")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--lod", type=int)
    p.add_argument("--frame", type=int, help="0-based timestep to pose (canonical when omitted)")

    p = sub.add_parser("ablate", help="train the structural ablation matrix and compare")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--variant", choices=list(ABLATIONS), action="append")

    p = sub.add_parser("noise-sweep", help="train from noisy pose initialisations")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--sigma", type=float, action="append", help=f"noise level (default {NOISE_LEVELS})")
    return parser


def _config(args) -> ExperimentConfig:
    pairs = parse_assignments(args.overrides)
    if args.seed is not None:
        pairs.append(("scene.seed" if args.command == "synth" else "train.seed", args.seed))
    if args.iterations is not None:
        pairs.append(("train.iterations", args.iterations))
    if args.workers is not None:
        pairs.append(("train.workers", args.workers))
    return load_config(args.config, pairs)


def cmd_synth(args, cfg):
    ds = obtain_dataset(cfg)[1]
    save_dataset(ds, args.out)
    save_config(cfg, args.out / "config.toml")
    print(f"wrote {ds.images.shape[0]} cameras x {ds.num_frames} frames to {args.out}")


def cmd_train(args, cfg):
    if args.checkpoint is not None:
        state = load_checkpoint(args.checkpoint)
        _, ds = obtain_dataset(state.cfg, args.dataset)
        extra = None if args.iterations is None else max(0, args.iterations - state.step)
        state, _, _, metrics = resume_training(args.checkpoint, ds, args.out, extra)
    else:
        cfg, ds = obtain_dataset(cfg, args.dataset)
        state, _, _, metrics = run_training(cfg, ds, args.out)
    for m in metrics[-2 * state.anchors.num_lods:]:
        print(f"{m['split']:>10} lod {m['lod']}: psnr {m['psnr']:.2f} ssim {m['ssim']:.4f}")


def _loaded(args):
    state = load_checkpoint(args.checkpoint)
    _, ds = obtain_dataset(state.cfg, args.dataset)
    data = prepare_data(ds, state.cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(state.cfg, args.out / "config.toml")
    return state, data


def cmd_eval(args, cfg):
    state, data = _loaded(args)
    lods = [args.lod] if args.lod else range(1, state.anchors.num_lods + 1)
    rows = [evaluate(state, data, split, lod) for split in (args.split or SPLITS) for lod in lods]
    write_csv(args.out / "metrics.csv", rows, METRIC_FIELDS)
    for r in rows:
        print(f"{r['split']:>10} lod {r['lod']}: psnr {r['psnr']:.2f} ssim {r['ssim']:.4f} splats {r['splats']}")


def cmd_render(args, cfg):
    state, data = _loaded(args)
    lod = args.lod or state.anchors.num_lods
    frames, cams = split_members(state, data, args.split)
    if args.frame not in frames:
        raise ValueError(f"frame {args.frame} is not in split {args.split} (frames {frames[0]}..{frames[-1]})")
    imgs = render_frame(state, args.frame, [data.cameras[c] for c in cams], lod)
    for c, img in zip(cams, imgs):
        save_png(args.out / f"{args.split}_c{c:02d}_t{args.frame:03d}_lod{lod}.png", img[..., :3])
    print(f"wrote {len(cams)} images to {args.out}")


def cmd_export(args, cfg):
    state = load_checkpoint(args.checkpoint)
    lod = args.lod or state.anchors.num_lods
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(state.cfg, args.out / "config.toml")
    cols = export_splats(state, lod, args.frame)
    name = "canonical" if args.frame is None else f"frame{args.frame:03d}"
    path = args.out / f"splats_{name}_lod{lod}.ply"
    write_ply(path, cols)
    print(f"wrote {len(cols['x'])} splats to {path}")


def cmd_ablate(args, cfg):
    cfg, ds = obtain_dataset(cfg, args.dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.toml")
    rows = run_ablations(cfg, ds, args.out, args.variant)
    print((args.out / "ablation.md").read_text())
    return rows


def cmd_noise(args, cfg):
    cfg, ds = obtain_dataset(cfg, args.dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.toml")
    rows = run_noise_sweep(cfg, ds, args.out, args.sigma or NOISE_LEVELS)
    for r in rows:
        print(f"sigma {r['sigma']:g}: psnr {r['psnr']:.2f} stable {r['stable']}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
            "export-ply": cmd_export, "ablate": cmd_ablate, "noise-sweep": cmd_noise}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (KeyError, ValueError) as e:
        parser.error(str(e).strip("'\""))
    try:
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"pigavatar {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
