"""Multi-resolution latent feature grid over canonical space.

A query trilinearly interpolates every level at the normalised position and
averages the results. Gradients of each level are low-pass filtered with
(I + lam_g L_g)^-2 before the optimiser sees them.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .linalg import SolveStats, lattice_laplacian, sobolev_cg, sobolev_dct
from .optim import AdamMoments, adam_update

log = logging.getLogger(__name__)

PAPER_RESOLUTIONS = (8, 13, 21, 34, 55, 88)
DESK_RESOLUTIONS = (8, 13, 21, 34)


def geometric_resolutions(coarsest: int, finest: int, levels: int) -> tuple[int, ...]:
    """Nearest-integer geometric progression pinned at both endpoints."""
    if levels == 1:
        return (coarsest,)
    factor = (finest / coarsest) ** (1.0 / (levels - 1))
    res = [int(round(coarsest * factor ** g)) for g in range(levels)]
    res[-1] = finest
    return tuple(res)


@dataclass
class GridLevel:
    resolution: int
    features: Tensor
    learning_rate: float = 1e-2
    smoothing: float = 0.0
    stats: SolveStats = field(default_factory=SolveStats)
    _lap: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        if self.learning_rate <= 0 or self.smoothing < 0:
            raise ValueError("need learning_rate > 0 and smoothing >= 0")
        n = self.resolution ** 3
        if self.features.shape[0] != n:
            raise ValueError(f"features must have {n} rows, got {self.features.shape}")

    @property
    def laplacian(self) -> sp.csr_matrix:
        if self._lap is None:
            self._lap = lattice_laplacian(self.resolution)
        return self._lap


@dataclass
class LatentGrid:
    levels: list[GridLevel]
    bounds: np.ndarray  # (2, 3): lower and upper corner
    clamped: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        dims = {lv.features.shape[1] for lv in self.levels}
        if len(dims) != 1:
            raise ValueError("all grid levels must share feature_dim")
        res = [lv.resolution for lv in self.levels]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"level resolutions must strictly increase: {res}")

    @property
    def feature_dim(self) -> int:
        return self.levels[0].features.shape[1]

    @property
    def center(self):
        return 0.5 * (self.bounds[0] + self.bounds[1])

    @property
    def half_extent(self):
        return 0.5 * (self.bounds[1] - self.bounds[0])

    def parameters(self) -> list[Tensor]:
        return [lv.features for lv in self.levels]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) / self.half_extent


def bounds_from_points(points: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Axis-aligned box of ``points`` grown by ``margin`` of its extent per side."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-6)
    return np.stack([lo - pad, hi + pad])


def make_grid(bounds, resolutions=DESK_RESOLUTIONS, feature_dim: int = 16, base_lr: float = 1e-2,
              lr_growth: float = 1.5, base_smoothing: float = 2.0, smoothing_growth: float = 1.25,
              init_scale: float = 1e-2, rng: np.random.Generator | None = None,
              dtype=np.float64) -> LatentGrid:
    rng = rng or np.random.default_rng(0)
    levels = []
    for g, r in enumerate(resolutions):
        feats = (init_scale * rng.standard_normal((r ** 3, feature_dim))).astype(dtype)
        levels.append(GridLevel(r, Tensor(feats, requires_grad=True, name=f"grid.{g}"),
                                base_lr * lr_growth ** g, base_smoothing * smoothing_growth ** g))
    return LatentGrid(levels, bounds)


def _cell_weights(u: np.ndarray, r: int):
    """Corner indices, weights and weight derivatives for continuous lattice coords ``u``."""
    i0 = np.clip(np.floor(u).astype(np.int64), 0, r - 2)
    f = u - i0
    idx = np.empty((u.shape[0], 8), dtype=np.int64)
    w = np.empty((u.shape[0], 8))
    dw = np.empty((u.shape[0], 8, 3))
    c = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                bits = (dx, dy, dz)
                phi = [f[:, a] if bits[a] else 1.0 - f[:, a] for a in range(3)]
                sgn = [1.0 if bits[a] else -1.0 for a in range(3)]
                idx[:, c] = ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
                w[:, c] = phi[0] * phi[1] * phi[2]
                dw[:, c, 0] = sgn[0] * phi[1] * phi[2]
                dw[:, c, 1] = sgn[1] * phi[0] * phi[2]
                dw[:, c, 2] = sgn[2] * phi[0] * phi[1]
                c += 1
    return idx, w, dw


def query(grid: LatentGrid, positions) -> Tensor:
    """Mean over levels of the trilinear interpolants at canonical ``positions`` (n x 3).

    Differentiable w.r.t. every level's features and w.r.t. the positions.
    Positions outside the box are clamped (counted in ``grid.clamped``).
    """
    pos_t = positions if isinstance(positions, Tensor) else Tensor(positions)
    x = pos_t.data.reshape(-1, 3)
    if np.isnan(x).any():
        raise ValueError("latent grid query: NaN position")
    xn = (x - grid.center) / grid.half_extent
    inside = (xn >= -1.0) & (xn <= 1.0)
    n_out = int(np.count_nonzero(~inside.all(axis=1)))
    if n_out:
        grid.clamped += n_out
        log.debug("clamped %d out-of-bounds grid queries", n_out)
    xn = np.clip(xn, -1.0, 1.0)
    n = x.shape[0]
    G = len(grid.levels)
    feats = [lv.features for lv in grid.levels]
    dtype = feats[0].data.dtype
    out = np.zeros((n, grid.feature_dim), dtype=np.float64)
    cache = []
    rows = np.repeat(np.arange(n), 8)
    for lv in grid.levels:
        r = lv.resolution
        u = (xn + 1.0) * 0.5 * (r - 1)
        idx, w, dw = _cell_weights(u, r)
        W = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, r ** 3))
        out += W @ lv.features.data
        cache.append((idx, W, dw, 0.5 * (r - 1)))
    out /= G
    out = out.astype(dtype, copy=False)

    def backward(g):
        g = g.astype(np.float64) / G
        grads = []
        gpos = np.zeros((n, 3))
        for lv, (idx, W, dw, scale) in zip(grid.levels, cache):
            grads.append((W.T @ g).astype(lv.features.data.dtype) if lv.features.requires_grad else None)
            if pos_t.requires_grad:
                # d(sum_c w_c F_c . g)/du = sum_c dw_c (F_c . g)
                fg = np.einsum("nck,nk->nc", lv.features.data[idx], g)
                gpos += np.einsum("nca,nc->na", dw, fg) * scale
        gpos = gpos / grid.half_extent * inside
        grads.append(gpos.reshape(pos_t.shape).astype(pos_t.data.dtype) if pos_t.requires_grad else None)
        return tuple(grads)

    return ad.record("grid_query", out, (*feats, pos_t), backward)


def precondition_grid_gradient(level: GridLevel, raw_gradient: np.ndarray, method: str = "cg") -> np.ndarray:
    """(I + lam_g L_g)^-2 applied per feature channel.

    ``method="cg"`` runs two CG solves (tol 1e-8, cap 200); ``"dct"`` uses the
    exact spectral solve of the same operator.
    """
    raw_gradient = np.asarray(raw_gradient)
    if raw_gradient.shape != level.features.shape:
        raise ValueError(f"gradient shape {raw_gradient.shape} != features {level.features.shape}")
    if method == "dct":
        return sobolev_dct(level.resolution, level.smoothing, raw_gradient)
    if method != "cg":
        raise ValueError(f"unknown solve method {method!r}")
    return sobolev_cg(level.laplacian, level.smoothing, raw_gradient, stats=level.stats)


def apply_grid_update(level: GridLevel, preconditioned_gradient: np.ndarray, moments: AdamMoments,
                      optimizer: str = "adam") -> None:
    """Adam (or plain SGD) step of size eta_g on the preconditioned gradient, in place."""
    if preconditioned_gradient.shape != level.features.shape:
        raise ValueError("gradient/feature shape mismatch")
    adam_update(level.features.data, preconditioned_gradient, moments, level.learning_rate, optimizer)


# -- snapshot I/O ------------------------------------------------------------

_GRID_MAGIC = b"PIGGRID1"


def save_grid(grid: LatentGrid, path) -> None:
    """Little-endian layout: magic, G:u32, d:u32, G x res:u32, bounds 6 x f64,
    dtype code u8 (4 or 8 bytes per value), then each level's r^3 x d array."""
    dt = grid.levels[0].features.data.dtype
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<II", len(grid.levels), grid.feature_dim))
        fh.write(struct.pack(f"<{len(grid.levels)}I", *[lv.resolution for lv in grid.levels]))
        fh.write(struct.pack("<6d", *grid.bounds.ravel()))
        fh.write(struct.pack("<B", dt.itemsize))
        for lv in grid.levels:
            fh.write(np.ascontiguousarray(lv.features.data, dtype=dt.newbyteorder("<")).tobytes())


def load_grid(path, **level_kwargs) -> LatentGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _GRID_MAGIC:
        raise ValueError("not a latent grid snapshot")
    off = 8
    G, d = struct.unpack_from("<II", blob, off)
    off += 8
    res = struct.unpack_from(f"<{G}I", blob, off)
    off += 4 * G
    bounds = np.array(struct.unpack_from("<6d", blob, off)).reshape(2, 3)
    off += 48
    (size,) = struct.unpack_from("<B", blob, off)
    off += 1
    dt = np.dtype(f"<f{size}")
    levels = []
    for g, r in enumerate(res):
        count = r ** 3 * d
        if off + count * size > len(blob):
            raise ValueError("truncated latent grid snapshot")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(r ** 3, d).astype(dt.newbyteorder("="))
        off += count * size
        levels.append(GridLevel(r, Tensor(arr, requires_grad=True, name=f"grid.{g}"), **level_kwargs))
    return LatentGrid(levels, bounds)
