"""Training loop, evaluation and checkpoints for the anchor avatar."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .anchor_graph import (AnchorSet, active_anchors, anchor_state_bytes, anchor_state_from_bytes,
                           apply_anchor_update, init_anchors, precondition_anchor_gradient)
from .autodiff import Tensor
from .config import ExperimentConfig, config_from_text, dump_config
from .decoders import (DecoderHeads, RunningMean, SplatFrame, build_conditioning, compose_splat, decode_all,
                       decode_model_refinement, embed_time, heads_from_bytes, make_heads, num_bands,
                       weights_bytes)
from .latent_field import (GridLevel, LatentGrid, apply_grid_update, bounds_from_points, make_grid,
                           precondition_grid_gradient, query)
from .losses import loss_pixels, masked_ssim, psnr, total_loss
from .optim import AdamMoments, adam_update
from .proxy import ModelParams, ProxyModel, build_humanoid, pose_mesh, rodrigues, transport
from .render import RenderStats, render_batch
from .synth import Dataset, perturb_poses

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PIGCKPT1"
CKPT_VERSION = 1


@dataclass
class TrainState:
    cfg: ExperimentConfig
    proxy: ProxyModel
    grid: LatentGrid
    anchors: AnchorSet
    heads: DecoderHeads
    moments: dict[str, AdamMoments]
    beta_avg: RunningMean
    params_init: ModelParams
    train_frames: int
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def dtype(self):
        return np.dtype(self.cfg.train.dtype)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"grid.{g}": lv.features for g, lv in enumerate(self.grid.levels)}
        out["anchors"] = self.anchors.positions
        for p in self.heads.parameters():
            out[p.name] = p
        return out


@dataclass
class TrainData:
    """Dataset plus the per-image tensors the loop needs."""
    dataset: Dataset
    targets: np.ndarray   # C x T x H x W x 3
    pixels: np.ndarray    # C x T x H x W, loss pixels
    train_frames: int

    @property
    def cameras(self):
        return self.dataset.cameras


def split_frames(T: int, held_out_fraction: float) -> int:
    held = int(round(T * held_out_fraction))
    return max(1, T - held)


def prepare_data(dataset: Dataset, cfg: ExperimentConfig) -> TrainData:
    dt = np.dtype(cfg.train.dtype)
    pixels = loss_pixels(dataset.masks.reshape(-1, *dataset.masks.shape[2:]), cfg.train.band_radius)
    return TrainData(dataset, dataset.images.astype(dt), pixels.reshape(dataset.masks.shape),
                     split_frames(dataset.num_frames, cfg.train.novel_pose_fraction))


def init_state(cfg: ExperimentConfig, data: TrainData) -> TrainState:
    mc, tc = cfg.model, cfg.train
    dt = np.dtype(tc.dtype)
    rng = np.random.default_rng(tc.seed)
    proxy = build_humanoid()
    anchors = init_anchors(proxy, mc.num_anchors, int(rng.integers(2 ** 31)), mc.lods, mc.knn_k,
                           mc.knn_weighting, tc.lr_anchor, tc.smoothing_knn, dt)
    grid = make_grid(bounds_from_points(anchors.attachments.point), mc.grid_resolutions, mc.feature_dim,
                     tc.lr_grid, tc.lr_grid_growth, tc.smoothing_grid, tc.smoothing_grid_growth,
                     mc.grid_init_scale, rng, dt)
    ds = data.dataset
    F = num_bands(data.train_frames)
    cond = mc.feature_dim + 2 * F + 1
    model_out = (proxy.num_betas + 3 * proxy.num_joints) if mc.refine_model else 0
    heads = make_heads(cond, mc.feature_dim + 2 * F, model_out, rng, mc.width, mc.depth, mc.model_width,
                       mc.model_depth, zero_color=True, shared=mc.shared_head, dtype=dt)
    poses = perturb_poses(ds.poses, tc.pose_noise, tc.seed + 1)
    params = ModelParams(np.asarray(ds.beta, dtype=np.float64), poses, ds.translations.copy())
    state = TrainState(cfg, proxy, grid, anchors, heads, {}, RunningMean(np.zeros(proxy.num_betas), tc.beta_decay),
                       params, data.train_frames, 0, rng)
    state.moments = {k: AdamMoments.like(p.data) for k, p in state.parameters().items()}
    return state


# -- forward ------------------------------------------------------------------

def _gamma(state: TrainState, frame: int) -> np.ndarray:
    return embed_time(frame + 1, state.train_frames)


def decode_frames(state: TrainState, lod: int, frames, gamma_frames, x: Tensor, dbeta, dtheta) -> SplatFrame:
    """Splats of the active anchors for each frame, stacked on a leading axis.

    ``gamma_frames`` picks the time embedding per frame; ``dbeta`` (B) and
    ``dtheta`` (K x J x 3) may be Tensors, arrays or None.
    """
    mc = state.cfg.model
    active = active_anchors(state.anchors, lod)
    xa = ad.take(x, active)
    att = state.anchors.attachments.subset(active)
    z = query(state.grid, xa)
    beta = Tensor(state.params_init.beta)
    if dbeta is not None:
        beta = beta + dbeta
    posed, rots, conds = [], [], []
    L = state.anchors.num_lods
    for k, (f, gf) in enumerate(zip(frames, gamma_frames)):
        theta = Tensor(state.params_init.poses[f])
        if dtheta is not None:
            theta = theta + dtheta[k]
        verts = pose_mesh(state.proxy, beta, theta, Tensor(state.params_init.translations[f]))
        p, R = transport(verts, state.proxy.triangles, att, xa)
        posed.append(p)
        rots.append(R)
        conds.append(build_conditioning(z, _gamma(state, gf), lod, L))
    K, n = len(frames), len(active)
    c, (dmu, dq, s, o) = decode_all(state.heads, ad.concat(conds, axis=0))
    if not mc.use_offsets:
        dmu = Tensor(np.zeros(dmu.shape, dtype=dmu.dtype))
    sf = compose_splat(ad.concat(posed, axis=0), ad.concat(rots, axis=0), dmu, dq, s, o, c)

    def split(t):
        return ad.reshape(t, (K, n, t.shape[-1]))

    return SplatFrame(split(sf.mu), split(sf.quat), split(sf.scale), split(sf.opacity), split(sf.sh))


def render_pairs(splats: SplatFrame, frame_index, cameras, stats: RenderStats | None = None) -> Tensor:
    """Render splat set ``frame_index[i]`` through ``cameras[i]`` for every pair."""
    frame_index = np.asarray(frame_index)

    def pick(t):
        return ad.take(t, frame_index, axis=0)

    return render_batch(pick(splats.mu), pick(splats.quat), pick(splats.scale), pick(splats.opacity),
                        pick(splats.sh), cameras, stats)


# -- training -----------------------------------------------------------------

def _diagnose(grads: dict[str, np.ndarray]) -> str:
    worst = max(grads, key=lambda k: float(np.nanmax(np.abs(np.nan_to_num(grads[k], nan=np.inf)))))
    return f"largest gradient in parameter group {worst!r}"


def train_step(state: TrainState, data: TrainData, lod: int | None = None) -> dict:
    """One optimisation step on a random LOD, view subset and frame subset."""
    tc, mc = state.cfg.train, state.cfg.model
    rng = state.rng
    L = state.anchors.num_lods
    drawn = int(rng.integers(1, L + 1))
    lod = drawn if lod is None else lod
    train_cams = np.asarray(data.dataset.train_cams)
    views = np.sort(rng.choice(train_cams, min(tc.views_per_iter, len(train_cams)), replace=False))
    frames = np.sort(rng.choice(data.train_frames, min(tc.timesteps_per_iter, data.train_frames), replace=False))
    N = len(state.anchors)
    zsub = np.sort(rng.choice(N, min(tc.zbar_subsample, N), replace=False)) if mc.refine_model else None

    params = state.parameters()
    names = list(params)
    with ad.Tape():
        x = state.anchors.positions
        dbeta = dtheta = None
        if mc.refine_model:
            gammas = np.stack([_gamma(state, f) for f in frames])
            db_t, dtheta = decode_model_refinement(state.heads, state.grid, ad.take(x, zsub), gammas,
                                                   state.proxy.num_betas)
            dbeta = ad.mean(db_t, axis=0)
            state.beta_avg.update(dbeta.data)
        splats = decode_frames(state, lod, frames, frames, x, dbeta, dtheta)
        K = len(frames)
        pair_k = np.tile(np.arange(K), len(views))
        pair_c = np.repeat(views, K)
        out = render_pairs(splats, pair_k, [data.cameras[c] for c in pair_c])
        pred = out[..., 0:3]
        target = data.targets[pair_c, frames[pair_k]]
        pix = data.pixels[pair_c, frames[pair_k]]
        loss, l1, ss = total_loss(pred, target, pix, tc.l1_weight, tc.ssim_weight)
        if not np.isfinite(loss.item()):
            grads = dict(zip(names, ad.grad(loss, [params[k] for k in names])))
            raise FloatingPointError(f"non-finite loss at step {state.step}: {_diagnose(grads)}")
        grads = dict(zip(names, ad.grad(loss, [params[k] for k in names])))
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError(f"non-finite gradient at step {state.step}: {_diagnose(grads)}")
    apply_updates(state, grads)
    state.step += 1
    return {"step": state.step, "lod": lod, "loss": float(loss.item()), "l1": float(l1.item()),
            "ssim": float(ss.item())}


def apply_updates(state: TrainState, grads: dict[str, np.ndarray]) -> None:
    tc = state.cfg.train
    for g, lv in enumerate(state.grid.levels):
        key = f"grid.{g}"
        raw = grads[key]
        pg = precondition_grid_gradient(lv, raw, tc.grid_solver) if tc.precondition else raw
        apply_grid_update(lv, pg, state.moments[key])
    if not tc.freeze_anchors:
        raw = grads["anchors"]
        pg = precondition_anchor_gradient(state.anchors, raw, tc.anchor_solver) if tc.precondition else raw
        apply_anchor_update(state.anchors, pg, state.moments["anchors"])
    for p in state.heads.parameters():
        lr = tc.lr_model if p.name.startswith("model") else tc.lr_decoder
        adam_update(p.data, grads[p.name], state.moments[p.name], lr)


def train(state: TrainState, data: TrainData, iterations: int | None = None, on_log=None,
          checkpoint_dir=None) -> list[dict]:
    """Run ``iterations`` steps (default: the configured count minus steps already done)."""
    tc = state.cfg.train
    target = tc.iterations if iterations is None else state.step + iterations
    history = []
    while state.step < target:
        row = train_step(state, data)
        history.append(row)
        if tc.log_every and (state.step % tc.log_every == 0 or state.step == target):
            if on_log is not None:
                on_log(row)
            log.info("step %d lod %d loss %.4f", row["step"], row["lod"], row["loss"])
        if checkpoint_dir is not None and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"step{state.step:06d}.ckpt")
    return history


# -- evaluation ---------------------------------------------------------------

def so3_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over joints of the geodesic angle between two axis-angle poses."""
    Ra = rodrigues(Tensor(np.asarray(a).reshape(-1, 3))).data
    Rb = rodrigues(Tensor(np.asarray(b).reshape(-1, 3))).data
    cos = (np.einsum("jab,jab->j", Ra, Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)).sum())


def nearest_training_frame(state: TrainState, frame: int) -> int:
    if frame < state.train_frames:
        return frame
    poses = state.params_init.poses
    d = [so3_distance(poses[frame], poses[t]) for t in range(state.train_frames)]
    return int(np.argmin(d))


def eval_refinement(state: TrainState):
    """Exact shape residual (mean over all training frames, all anchors) and per-frame pose residuals."""
    if not state.cfg.model.refine_model:
        return None, None
    gammas = np.stack([_gamma(state, f) for f in range(state.train_frames)])
    with ad.no_grad():
        db, dth = decode_model_refinement(state.heads, state.grid, state.anchors.positions, gammas,
                                          state.proxy.num_betas)
    return db.data.mean(axis=0), dth.data


def split_members(state: TrainState, data: TrainData, split: str):
    ds = data.dataset
    if split == "novel_view":
        return list(range(state.train_frames)), list(ds.test_cams)
    if split == "novel_pose":
        return list(range(state.train_frames, ds.num_frames)), list(ds.train_cams)
    if split == "train":
        return list(range(state.train_frames)), list(ds.train_cams)
    raise ValueError(f"unknown split {split!r}")


def render_frame(state: TrainState, frame: int, cams: list, lod: int, refinement=None) -> np.ndarray:
    """Images (len(cams) x H x W x 4) of one frame at one LOD, no gradients."""
    db, dth = refinement if refinement is not None else eval_refinement(state)
    gf = nearest_training_frame(state, frame)
    with ad.no_grad():
        dtheta = None
        if dth is not None and frame < state.train_frames:
            dtheta = dth[frame:frame + 1]
        splats = decode_frames(state, lod, [frame], [gf], state.anchors.positions, db, dtheta)
        return render_pairs(splats, np.zeros(len(cams), dtype=int), cams).data


def evaluate(state: TrainState, data: TrainData, split: str = "novel_view", lod: int | None = None) -> dict:
    lod = state.anchors.num_lods if lod is None else lod
    frames, cams = split_members(state, data, split)
    refinement = eval_refinement(state)
    tc = state.cfg.train
    psnrs, ssims, l1s, losses = [], [], [], []
    for f in frames:
        imgs = render_frame(state, f, [data.cameras[c] for c in cams], lod, refinement)
        for i, c in enumerate(cams):
            pred = imgs[i, ..., :3].astype(np.float64)
            tgt = data.targets[c, f].astype(np.float64)
            pix = data.pixels[c, f]
            psnrs.append(psnr(pred, tgt, pix))
            with ad.no_grad():
                ssims.append(float(masked_ssim(pred, tgt, pix).item()))
            l1s.append(float(np.abs(pred - tgt)[pix].mean()))
            losses.append(tc.l1_weight * l1s[-1] + tc.ssim_weight * (1.0 - ssims[-1]))
    return {"step": state.step, "split": split, "lod": lod, "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)), "l1": float(np.mean(l1s)), "loss": float(np.mean(losses)),
            "splats": len(active_anchors(state.anchors, lod))}


def time_render(state: TrainState, data: TrainData, lod: int, repeats: int = 5, frame: int = 0) -> float:
    """Best-of-``repeats`` wall time to decode and render one frame through the test cameras."""
    cams = [data.cameras[c] for c in data.dataset.test_cams]
    refinement = eval_refinement(state)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        render_frame(state, frame, cams, lod, refinement)
        best = min(best, time.perf_counter() - t0)
    return best


METRIC_FIELDS = ["step", "split", "lod", "psnr", "ssim", "l1", "loss", "splats"]
LOG_FIELDS = ["step", "lod", "loss", "l1", "ssim"]


def write_csv(path, rows: list[dict], fields_: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields_, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def preview_grid(state: TrainState, data: TrainData, frame: int = 0) -> np.ndarray:
    """Held-out views (rows) by LOD coarse to fine (columns), plus the target in the last column."""
    cams = list(data.dataset.test_cams) or list(data.dataset.train_cams[:1])
    refinement = eval_refinement(state)
    cols = [render_frame(state, frame, [data.cameras[c] for c in cams], lod, refinement)[..., :3]
            for lod in range(1, state.anchors.num_lods + 1)]
    cols.append(data.targets[cams, frame])
    rows = [np.concatenate([col[i] for col in cols], axis=1) for i in range(len(cams))]
    return np.concatenate(rows, axis=0)


def export_splats(state: TrainState, lod: int, frame: int | None = None) -> dict[str, np.ndarray]:
    """PLY columns for the active splats, posed at ``frame`` or in canonical space when None.

    Canonical splats use the identity transport and the time code of frame 0.
    """
    active = active_anchors(state.anchors, lod)
    with ad.no_grad():
        if frame is None:
            x = ad.take(state.anchors.positions, active)
            z = query(state.grid, x)
            cond = build_conditioning(z, _gamma(state, 0), lod, state.anchors.num_lods)
            c, (dmu, dq, s, o) = decode_all(state.heads, cond)
            if not state.cfg.model.use_offsets:
                dmu = dmu * 0.0
            eye = np.broadcast_to(np.eye(3, dtype=x.dtype), (len(active), 3, 3)).copy()
            sf = compose_splat(x, Tensor(eye), dmu, dq, s, o, c)
        else:
            db, dth = eval_refinement(state)
            gf = nearest_training_frame(state, frame)
            dtheta = dth[frame:frame + 1] if dth is not None and frame < state.train_frames else None
            full = decode_frames(state, lod, [frame], [gf], state.anchors.positions, db, dtheta)
            sf = SplatFrame(*(t.data[0] for t in (full.mu, full.quat, full.scale, full.opacity, full.sh)))
    arr = {k: np.asarray(getattr(v, "data", v), dtype=np.float32)
           for k, v in zip(("mu", "quat", "scale", "opacity", "sh"), (sf.mu, sf.quat, sf.scale, sf.opacity, sf.sh))}
    cols = {"x": arr["mu"][:, 0], "y": arr["mu"][:, 1], "z": arr["mu"][:, 2]}
    sh = arr["sh"].reshape(-1, 16, 3)
    for ch in range(3):
        cols[f"f_dc_{ch}"] = sh[:, 0, ch]
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(len(active), -1)  # channel-major, as splat viewers expect
    for j in range(rest.shape[1]):
        cols[f"f_rest_{j}"] = rest[:, j]
    o = np.clip(arr["opacity"][:, 0].astype(np.float64), 1e-7, 1 - 1e-7)
    cols["opacity"] = np.log(o / (1 - o)).astype(np.float32)
    for a in range(3):
        cols[f"scale_{a}"] = np.log(arr["scale"][:, a])
    for a in range(4):
        cols[f"rot_{a}"] = arr["quat"][:, a]
    return cols


# -- checkpoints --------------------------------------------------------------

def _arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrs = {}
    for g, lv in enumerate(state.grid.levels):
        arrs[f"grid.{g}"] = lv.features.data
    arrs["grid.bounds"] = state.grid.bounds
    arrs["anchors.positions"] = state.anchors.positions.data
    arrs["anchors.fixed"] = np.frombuffer(anchor_state_bytes(state.anchors), dtype=np.uint8)
    arrs["heads"] = np.frombuffer(weights_bytes(state.heads), dtype=np.uint8)
    for k in sorted(state.moments):
        arrs[f"moments.{k}.m"] = state.moments[k].m
        arrs[f"moments.{k}.v"] = state.moments[k].v
    arrs["beta_avg"] = state.beta_avg.value
    arrs["init.beta"] = state.params_init.beta
    arrs["init.poses"] = state.params_init.poses
    arrs["init.translations"] = state.params_init.translations
    return arrs


def checkpoint_bytes(state: TrainState) -> bytes:
    """magic, version u32, header length u32, JSON header, raw arrays, sha256 of everything before."""
    arrs = _arrays(state)
    table, blobs, off = [], [], 0
    for name, a in arrs.items():
        a = np.ascontiguousarray(a)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": off,
                      "nbytes": len(raw)})
        blobs.append(raw)
        off += len(raw)
    header = {
        "config": dump_config(state.cfg),
        "step": state.step,
        "train_frames": state.train_frames,
        "rng": state.rng.bit_generator.state,
        "moment_steps": {k: state.moments[k].t for k in sorted(state.moments)},
        "beta_avg_count": state.beta_avg.count,
        "grid_clamped": state.grid.clamped,
        "arrays": table,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def state_from_bytes(blob: bytes) -> TrainState:
    if len(blob) < 48 or blob[:8] != CKPT_MAGIC:
        raise ValueError("not a training checkpoint")
    body, digest = blob[:-32], blob[-32:]
    version, hlen = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    if 16 + hlen > len(body):
        raise ValueError("checkpoint is truncated")
    try:
        header = json.loads(body[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise ValueError("checkpoint is truncated or corrupt") from e
    data_start = 16 + hlen
    need = sum(a["nbytes"] for a in header["arrays"])
    if len(body) - data_start != need:
        raise ValueError(f"checkpoint is truncated: expected {need} data bytes, found {len(body) - data_start}")
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("checkpoint checksum mismatch")
    arrs = {}
    for a in header["arrays"]:
        dt = np.dtype(a["dtype"])
        raw = np.frombuffer(body, dtype=dt, count=a["nbytes"] // max(dt.itemsize, 1),
                            offset=data_start + a["offset"])
        arrs[a["name"]] = raw.reshape(a["shape"]).astype(dt.newbyteorder("="))

    cfg = config_from_text(header["config"])
    tc = cfg.train
    proxy = build_humanoid()
    res = cfg.model.grid_resolutions
    levels = []
    for g, r in enumerate(res):
        feats = arrs[f"grid.{g}"]
        if feats.shape[0] != r ** 3:
            raise ValueError(f"grid level {g}: stored shape {feats.shape} does not match resolution {r}")
        levels.append(GridLevel(r, Tensor(feats, requires_grad=True, name=f"grid.{g}"),
                                tc.lr_grid * tc.lr_grid_growth ** g,
                                tc.smoothing_grid * tc.smoothing_grid_growth ** g))
    grid = LatentGrid(levels, arrs["grid.bounds"], header["grid_clamped"])
    anchors = anchor_state_from_bytes(arrs["anchors.fixed"].tobytes(), arrs["anchors.positions"],
                                      tc.lr_anchor, tc.smoothing_knn)
    heads = heads_from_bytes(arrs["heads"].tobytes())
    moments = {k: AdamMoments(arrs[f"moments.{k}.m"], arrs[f"moments.{k}.v"], int(t))
               for k, t in header["moment_steps"].items()}
    beta_avg = RunningMean(arrs["beta_avg"], tc.beta_decay, header["beta_avg_count"])
    params = ModelParams(arrs["init.beta"], arrs["init.poses"], arrs["init.translations"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = TrainState(cfg, proxy, grid, anchors, heads, moments, beta_avg, params, header["train_frames"],
                       header["step"], rng)
    missing = set(state.parameters()) - set(moments)
    if missing:
        raise ValueError(f"checkpoint lacks optimiser state for {sorted(missing)}")
    return state


def load_checkpoint(path) -> TrainState:
    return state_from_bytes(Path(path).read_bytes())


# -- experiment helpers -------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no_preconditioning": {"train.precondition": False},
    "frozen_anchors": {"train.freeze_anchors": True},
    "no_offsets": {"model.use_offsets": False},
    "shared_head": {"model.shared_head": True},
}


def ablation_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    from .config import apply_overrides
    return apply_overrides(cfg, list(ABLATIONS[name].items()))


def run_experiment(cfg: ExperimentConfig, dataset: Dataset, iterations: int | None = None, on_log=None):
    data = prepare_data(dataset, cfg)
    state = init_state(cfg, data)
    history = train(state, data, iterations, on_log)
    return state, data, history
