"""Experiment configuration: dataclasses, TOML-style files and overrides.

Files have ``[scene]``, ``[model]`` and ``[train]`` sections of flat
``key = value`` pairs. Any field can be overridden with ``section.key=value``
strings or with environment variables such as ``PIG_TRAIN_ITERATIONS=500``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import tomli

from .latent_field import DESK_RESOLUTIONS
from .synth import SceneSpec


@dataclass
class ModelConfig:
    num_anchors: int = 4000
    lods: int = 3
    knn_k: int = 8
    knn_weighting: str = "uniform"
    grid_resolutions: tuple[int, ...] = DESK_RESOLUTIONS
    feature_dim: int = 16
    width: int = 64
    depth: int = 3
    model_width: int = 32
    model_depth: int = 3
    shared_head: bool = False
    use_offsets: bool = True
    refine_model: bool = True
    grid_init_scale: float = 0.1


@dataclass
class TrainConfig:
    iterations: int = 3000
    views_per_iter: int = 4
    timesteps_per_iter: int = 5
    lr_decoder: float = 1e-3
    lr_model: float = 1e-4
    lr_grid: float = 1e-2
    lr_grid_growth: float = 1.5
    lr_anchor: float = 2e-3  # cm per step
    smoothing_grid: float = 2.0
    smoothing_grid_growth: float = 1.25
    smoothing_knn: float = 8.0
    precondition: bool = True
    grid_solver: str = "dct"
    anchor_solver: str = "direct"
    freeze_anchors: bool = False
    l1_weight: float = 8.0
    ssim_weight: float = 2.0
    band_radius: int = 2
    zbar_subsample: int = 512
    beta_decay: float = 0.99
    novel_pose_fraction: float = 0.2
    pose_noise: float = 0.0
    dtype: str = "float32"
    seed: int = 0
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0
    preview_every: int = 0
    workers: int = 1

    def __post_init__(self):
        rates = (self.lr_decoder, self.lr_model, self.lr_grid, self.lr_anchor)
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.views_per_iter < 1 or self.timesteps_per_iter < 1:
            raise ValueError("need at least one view and one timestep per iteration")


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def sections(self):
        return {"scene": self.scene, "model": self.model, "train": self.train}


def _coerce(template, value):
    """Convert ``value`` (parsed TOML or a string) to the type of ``template``."""
    if isinstance(template, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return low in ("true", "1", "yes")
        return bool(value)
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").replace("[", "").replace("]", "").split(",")
                     if v.strip()]
        elem = template[0] if template else 0.0
        return tuple(_coerce(elem, v) for v in value)
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return str(value)


def _apply(section, key: str, value):
    names = {f.name for f in fields(section)}
    if key not in names:
        raise KeyError(f"unknown setting {key!r}; valid: {sorted(names)}")
    return replace(section, **{key: _coerce(getattr(section, key), value)})


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """``overrides``: iterable of (dotted key, value) pairs."""
    secs = cfg.sections()
    for dotted, value in overrides:
        if "." not in dotted:
            raise KeyError(f"override {dotted!r} needs a section, e.g. train.iterations")
        sec, key = dotted.split(".", 1)
        if sec not in secs:
            raise KeyError(f"unknown config section {sec!r}")
        secs[sec] = _apply(secs[sec], key, value)
    return ExperimentConfig(**secs)


def env_overrides(environ=None) -> list[tuple[str, str]]:
    """PIG_<SECTION>_<KEY>=value pairs from the environment."""
    environ = os.environ if environ is None else environ
    out = []
    for name, value in sorted(environ.items()):
        if not name.startswith("PIG_"):
            continue
        rest = name[4:].lower()
        sec, _, key = rest.partition("_")
        if sec in ("scene", "model", "train") and key:
            out.append((f"{sec}.{key}", value))
    return out


def parse_assignments(items) -> list[tuple[str, str]]:
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=(), environ=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        pairs = []
        for sec, body in data.items():
            if not isinstance(body, dict):
                raise KeyError(f"top-level key {sec!r} must be a [section]")
            pairs += [(f"{sec}.{k}", v) for k, v in body.items()]
        cfg = apply_overrides(cfg, pairs)
    cfg = apply_overrides(cfg, env_overrides(environ))
    return apply_overrides(cfg, overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, tuple):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, obj in cfg.sections().items():
        lines.append(f"[{sec}]")
        lines += [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def config_from_text(text: str) -> ExperimentConfig:
    data = tomli.loads(text)
    pairs = [(f"{sec}.{k}", v) for sec, body in data.items() for k, v in body.items()]
    return apply_overrides(ExperimentConfig(), pairs)
