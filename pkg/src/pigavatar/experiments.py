"""Run-directory orchestration shared by the command line and the scripts.

A run directory holds ``config.toml``, ``train_log.csv``, ``metrics.csv``,
``checkpoints/`` and ``previews/``. Nothing written there depends on wall
time, so two runs with the same config produce identical files.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, apply_overrides, save_config
from .render import save_png
from .synth import Dataset, generate, load_dataset
from .trainer import (ABLATIONS, LOG_FIELDS, METRIC_FIELDS, TrainData, TrainState, evaluate, init_state,
                      load_checkpoint, prepare_data, preview_grid, save_checkpoint, train, write_csv)

log = logging.getLogger(__name__)

SPLITS = ("novel_view", "novel_pose")
NOISE_LEVELS = (0.0, 0.1, 0.2, 0.25)


def obtain_dataset(cfg: ExperimentConfig, path=None) -> tuple[ExperimentConfig, Dataset]:
    """Load ``path`` (and adopt its scene spec) or synthesise from ``cfg.scene``."""
    if path is None:
        return cfg, generate(cfg.scene)
    ds = load_dataset(path)
    return ExperimentConfig(ds.spec, cfg.model, cfg.train), ds


def final_metrics(state: TrainState, data: TrainData, splits=SPLITS, lods=None) -> list[dict]:
    lods = range(1, state.anchors.num_lods + 1) if lods is None else lods
    return [evaluate(state, data, split, lod) for split in splits for lod in lods]


def run_training(cfg: ExperimentConfig, dataset: Dataset, out=None, state: TrainState | None = None,
                 iterations: int | None = None) -> tuple[TrainState, TrainData, list[dict], list[dict]]:
    """Train to ``cfg.train.iterations`` (or ``iterations`` more steps) and evaluate every split and LOD."""
    tc = cfg.train
    data = prepare_data(dataset, cfg)
    state = init_state(cfg, data) if state is None else state
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(state.cfg, out / "config.toml")
    target = tc.iterations if iterations is None else state.step + iterations
    history, periodic = [], []
    while state.step < target:
        chunk = target - state.step
        for every in (tc.eval_every, tc.checkpoint_every, tc.preview_every):
            if every and out is not None:
                chunk = min(chunk, every - state.step % every)
        history += train(state, data, chunk)
        if out is None:
            continue
        if tc.eval_every and state.step % tc.eval_every == 0:
            periodic.append(evaluate(state, data, "novel_view"))
        if tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(state, out / "checkpoints" / f"step{state.step:06d}.ckpt")
        if tc.preview_every and state.step % tc.preview_every == 0:
            (out / "previews").mkdir(exist_ok=True)
            save_png(out / "previews" / f"step{state.step:06d}.png", preview_grid(state, data))
    metrics = periodic + final_metrics(state, data)
    if out is not None:
        write_csv(out / "train_log.csv", history, LOG_FIELDS)
        write_csv(out / "metrics.csv", metrics, METRIC_FIELDS)
        save_checkpoint(state, out / "final.ckpt")
    return state, data, history, metrics


def resume_training(checkpoint, dataset: Dataset, out=None, iterations: int | None = None):
    state = load_checkpoint(checkpoint)
    return run_training(state.cfg, dataset, out, state, iterations)


def run_ablations(cfg: ExperimentConfig, dataset: Dataset, out=None, variants=None, done=None) -> list[dict]:
    """Train each structural variant with the same seed and budget; compare novel-view PSNR.

    ``done`` maps variant names to already trained states, which are evaluated
    instead of retrained.
    """
    variants = list(ABLATIONS) if variants is None else list(variants)
    done = done or {}
    rows = []
    for name in variants:
        vcfg = apply_overrides(cfg, list(ABLATIONS[name].items()))
        sub = Path(out) / name if out is not None else None
        if name in done:
            state = done[name]
            data = prepare_data(dataset, vcfg)
            metrics = [evaluate(state, data, "novel_view")]
        else:
            state, data, _, metrics = run_training(vcfg, dataset, sub)
        nv = [m for m in metrics if m["split"] == "novel_view" and m["lod"] == state.anchors.num_lods][-1]
        rows.append({"variant": name, "iterations": state.step, "psnr": nv["psnr"], "ssim": nv["ssim"]})
        log.info("ablation %s: %.2f dB", name, nv["psnr"])
    base = next((r["psnr"] for r in rows if r["variant"] == "full"), None)
    for r in rows:
        r["drop"] = (base - r["psnr"]) if base is not None else float("nan")
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out) / "ablation.csv", rows, ["variant", "iterations", "psnr", "ssim", "drop"])
        (Path(out) / "ablation.md").write_text(markdown_table(rows, ["variant", "psnr", "ssim", "drop"]))
    return rows


def run_noise_sweep(cfg: ExperimentConfig, dataset: Dataset, out=None, sigmas=NOISE_LEVELS, done=None) -> list[dict]:
    """Train from pose initialisations perturbed by each sigma (radians per component)."""
    done = done or {}
    rows = []
    for sigma in sigmas:
        scfg = apply_overrides(cfg, [("train.pose_noise", float(sigma)), ("model.refine_model", True)])
        sub = Path(out) / f"sigma_{sigma:g}" if out is not None else None
        row = {"sigma": float(sigma)}
        if sigma in done:
            state = done[sigma]
            data = prepare_data(dataset, scfg)
            nv = evaluate(state, data, "novel_view")
            final_loss = float("nan")
        else:
            try:
                state, data, history, metrics = run_training(scfg, dataset, sub)
            except FloatingPointError as e:
                log.error("sigma %g diverged: %s", sigma, e)
                rows.append({**row, "psnr": float("nan"), "ssim": float("nan"), "final_loss": float("nan"),
                             "stable": False})
                continue
            nv = [m for m in metrics if m["split"] == "novel_view" and m["lod"] == state.anchors.num_lods][-1]
            final_loss = history[-1]["loss"] if history else float("nan")
        rows.append({**row, "psnr": nv["psnr"], "ssim": nv["ssim"], "final_loss": final_loss,
                     "stable": bool(np.isfinite(nv["psnr"]))})
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out) / "noise.csv", rows, ["sigma", "psnr", "ssim", "final_loss", "stable"])
    return rows


def markdown_table(rows: list[dict], cols: list[str]) -> str:
    def fmt(v):
        return f"{v:.2f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"
