"""Synthetic multi-view sequences of the proxy body wearing a swaying skirt.

Ground truth is rendered from a dense cloud of tiny fixed splats placed on
the posed surface, so it shares the rasteriser but none of the learnable
pipeline. The skirt sways on its own schedule, which the proxy cannot
explain; the avatar has to absorb that motion in its residuals.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .proxy import ProxyModel, build_humanoid, pose_mesh, sample_surface, save_poses_csv, load_poses_csv
from .render import SH_C0, Camera, look_at, render_batch, save_png, save_raw, load_png, load_raw


@dataclass
class SceneSpec:
    frames: int = 20
    image_size: int = 96
    focal: float = 175.0
    ring_radius: float = 400.0
    eye_height: float = 120.0
    target_height: float = 88.0
    train_cameras: int = 8
    held_out_angles: tuple[float, ...] = (22.5, 202.5)
    beta: tuple[float, ...] = (0.2, -0.1)
    motion_scale: float = 1.0
    motion_period: float = 11.3  # frames; deliberately not a divisor of the sequence length
    clothing: bool = True
    clothing_offset: float = 0.1  # fraction of torso width
    sway_amplitude: float = 0.12  # radians
    sway_period: float = 7.7
    surface_points: int = 30000
    point_sigma: float = 0.8
    point_opacity: float = 0.95
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("held_out_angles", "beta"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray        # C x T x H x W x 3, 8-bit levels stored as float32
    alphas: np.ndarray        # C x T x H x W float32
    cameras: list[Camera]
    train_cams: list[int]
    test_cams: list[int]
    poses: np.ndarray         # T x J x 3 initial body poses
    beta: np.ndarray
    translations: np.ndarray  # T x 3
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def num_frames(self) -> int:
        return self.images.shape[1]

    @property
    def masks(self) -> np.ndarray:
        return self.alphas > 0.5


# -- layout and motion --------------------------------------------------------

def ring_cameras(angles_deg, spec: SceneSpec) -> list[Camera]:
    cams = []
    for a in np.radians(np.asarray(angles_deg, dtype=np.float64)):
        eye = [spec.ring_radius * np.sin(a), spec.eye_height, spec.ring_radius * np.cos(a)]
        cams.append(look_at(eye, [0.0, spec.target_height, 0.0], fx=spec.focal,
                            width=spec.image_size, height=spec.image_size))
    return cams


# (joint, axis, amplitude rad, phase) of the scripted sinusoids
_MOTION = [
    (0, (0, 1, 0), 0.35, 0.0),
    (1, (1, 0, 0), 0.15, 1.1),
    (2, (0, 1, 0), 0.30, 2.0),
    (3, (0, 0, 1), 0.45, 0.3),
    (4, (0, 0, 1), 0.50, 1.7),
    (5, (0, 0, 1), 0.45, 3.4),
    (6, (1, 0, 0), 0.50, 0.9),
    (7, (1, 0, 0), 0.40, 0.0),
    (8, (1, 0, 0), 0.40, np.pi),
]


def motion_script(spec: SceneSpec, num_joints: int) -> np.ndarray:
    t = np.arange(spec.frames)
    poses = np.zeros((spec.frames, num_joints, 3))
    for j, axis, amp, phase in _MOTION:
        ang = spec.motion_scale * amp * np.sin(2 * np.pi * t / spec.motion_period + phase)
        poses[:, j] = ang[:, None] * np.asarray(axis, dtype=np.float64)
    return poses


def perturb_poses(poses: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) to every axis-angle component."""
    if sigma < 0:
        raise ValueError("noise level must be >= 0")
    poses = np.asarray(poses, dtype=np.float64)
    if sigma == 0:
        return poses.copy()
    return poses + np.random.default_rng(seed).normal(scale=sigma, size=poses.shape)


# -- geometry and appearance --------------------------------------------------

_SEGMENT_COLOURS = np.array([
    [0.80, 0.35, 0.25], [0.85, 0.70, 0.55], [0.25, 0.45, 0.75], [0.85, 0.70, 0.55],
    [0.25, 0.45, 0.75], [0.85, 0.70, 0.55], [0.30, 0.30, 0.35], [0.30, 0.30, 0.35],
])
_SKIRT_COLOUR = np.array([0.20, 0.65, 0.35])


def _albedo(base: np.ndarray, canon: np.ndarray, period: float = 15.0) -> np.ndarray:
    band = 0.5 + 0.5 * np.sin(2 * np.pi * canon[:, 1] / period + 0.4 * np.sin(2 * np.pi * canon[:, 0] / 40.0))
    return np.clip(base * (0.65 + 0.45 * band[:, None]), 0.05, 0.95)


def _skirt_samples(count: int, rng, top_y: float, bottom_y: float, top_r: float, bottom_r: float):
    """Points on a conical shell (canonical frame) and their outward normals."""
    h = rng.random(count)
    phi = rng.random(count) * 2 * np.pi
    # area grows with radius; accept-reject keeps density uniform
    r = top_r + (bottom_r - top_r) * h
    keep = rng.random(count) * max(top_r, bottom_r) <= r
    h, phi, r = h[keep], phi[keep], r[keep]
    y = top_y + (bottom_y - top_y) * h
    return np.stack([r * np.sin(phi), y, r * np.cos(phi)], axis=1)


def _rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


@dataclass
class GroundTruthBody:
    proxy: ProxyModel
    tri: np.ndarray
    bary: np.ndarray
    body_colour: np.ndarray
    skirt_points: np.ndarray
    skirt_colour: np.ndarray
    pelvis: np.ndarray


def build_ground_truth(spec: SceneSpec, rng: np.random.Generator) -> GroundTruthBody:
    proxy = build_humanoid()
    verts, joints = proxy.shaped(spec.beta)
    tri, bary = sample_surface(verts, proxy.triangles, spec.surface_points, rng)
    corners = verts[proxy.triangles[tri]]
    canon = np.einsum("nk,nka->na", bary, corners)
    seg = proxy.segment[proxy.triangles[tri, 0]]
    body_colour = _albedo(_SEGMENT_COLOURS[seg], canon)
    if spec.clothing:
        width = np.ptp(verts[proxy.segment == 0, 0])
        off = spec.clothing_offset * width
        top_r = 0.5 * width + off
        skirt = _skirt_samples(spec.surface_points // 3, rng, 92.0, 55.0, top_r, top_r + 8.0)
        skirt_colour = _albedo(np.broadcast_to(_SKIRT_COLOUR, skirt.shape), skirt, period=10.0)
    else:
        skirt = np.zeros((0, 3))
        skirt_colour = np.zeros((0, 3))
    return GroundTruthBody(proxy, tri, bary, body_colour, skirt, skirt_colour, joints[0].copy())


def posed_points(gt: GroundTruthBody, spec: SceneSpec, pose: np.ndarray, frame: int) -> np.ndarray:
    with ad.no_grad():
        posed = pose_mesh(gt.proxy, np.asarray(spec.beta), pose).data
    body = np.einsum("nk,nka->na", gt.bary, posed[gt.proxy.triangles[gt.tri]])
    if not len(gt.skirt_points):
        return body
    from .proxy import rodrigues
    R_root = rodrigues(Tensor(pose[0][None])).data[0]
    sway = spec.motion_scale * spec.sway_amplitude * np.sin(2 * np.pi * frame / spec.sway_period + 0.5)
    R = R_root @ _rot_x(sway)
    skirt = (gt.skirt_points - gt.pelvis) @ R.T + gt.pelvis
    return np.concatenate([body, skirt])


def _render_cloud(points, colours, spec: SceneSpec, cameras: list[Camera]) -> np.ndarray:
    n = len(points)
    sh = np.zeros((n, 48))
    sh[:, :3] = (colours - 0.5) / SH_C0
    B = len(cameras)

    def rep(x):
        return Tensor(np.repeat(np.asarray(x, dtype=np.float64)[None], B, axis=0))

    with ad.no_grad():
        out = render_batch(rep(points), rep(np.tile([1.0, 0, 0, 0], (n, 1))), rep(np.full((n, 3), spec.point_sigma)),
                           rep(np.full((n, 1), spec.point_opacity)), rep(sh), cameras)
    return out.data


def generate(spec: SceneSpec | None = None) -> Dataset:
    spec = spec or SceneSpec()
    rng = np.random.default_rng(spec.seed)
    gt = build_ground_truth(spec, rng)
    train_angles = np.arange(spec.train_cameras) * 360.0 / spec.train_cameras
    cameras = ring_cameras(list(train_angles) + list(spec.held_out_angles), spec)
    poses = motion_script(spec, gt.proxy.num_joints)
    colours = np.concatenate([gt.body_colour, gt.skirt_colour])
    C, T, S = len(cameras), spec.frames, spec.image_size
    images = np.zeros((C, T, S, S, 3), dtype=np.float32)
    alphas = np.zeros((C, T, S, S), dtype=np.float32)
    for t in range(T):
        out = _render_cloud(posed_points(gt, spec, poses[t], t), colours, spec, cameras)
        # quantise to 8-bit levels so the PNG files carry the exact training targets
        images[:, t] = np.round(np.clip(out[..., :3], 0, 1) * 255.0) / 255.0
        alphas[:, t] = out[..., 3]
    return Dataset(images, alphas, cameras, list(range(spec.train_cameras)),
                   list(range(spec.train_cameras, C)), poses, np.asarray(spec.beta, dtype=np.float64),
                   np.zeros((T, 3)), spec)


# -- dataset directory --------------------------------------------------------

def _camera_json(c: Camera) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "rotation": c.rotation.tolist(),
            "translation": c.translation.tolist(), "width": c.width, "height": c.height}


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "alpha").mkdir(exist_ok=True)
    C, T = ds.images.shape[:2]
    for c in range(C):
        for t in range(T):
            save_png(root / "images" / f"c{c:02d}_t{t:03d}.png", ds.images[c, t])
            save_raw(root / "alpha" / f"c{c:02d}_t{t:03d}.raw", ds.alphas[c, t])
    meta = {"cameras": [_camera_json(c) for c in ds.cameras], "train": ds.train_cams, "test": ds.test_cams,
            "beta": ds.beta.tolist(), "translations": ds.translations.tolist()}
    (root / "cameras.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    (root / "spec.json").write_text(json.dumps(ds.spec.to_json(), indent=1, sort_keys=True) + "\n")
    save_poses_csv(ds.poses, root / "poses.csv")


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "cameras.json").read_text())
    spec = SceneSpec.from_json(json.loads((root / "spec.json").read_text()))
    cameras = [Camera(**c) for c in meta["cameras"]]
    poses = load_poses_csv(root / "poses.csv")
    C, T = len(cameras), len(poses)
    H, W = cameras[0].height, cameras[0].width
    images = np.zeros((C, T, H, W, 3), dtype=np.float32)
    alphas = np.zeros((C, T, H, W), dtype=np.float32)
    for c in range(C):
        for t in range(T):
            images[c, t] = load_png(root / "images" / f"c{c:02d}_t{t:03d}.png")
            alphas[c, t] = load_raw(root / "alpha" / f"c{c:02d}_t{t:03d}.raw")
    return Dataset(images, alphas, cameras, meta["train"], meta["test"], poses, np.asarray(meta["beta"]),
                   np.asarray(meta["translations"], dtype=np.float64).reshape(T, 3), spec)
