"""CPU Gaussian splat renderer.

Per-splat projection, covariance splatting and SH colour are written with
tape ops, batched over views. Rasterisation and its adjoint are numba
kernels that walk splats in global depth order over their 3-sigma boxes.
Pixel (x, y) has its centre at image coordinates (x, y).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rotations import quat_to_matrix

log = logging.getLogger(__name__)

NEAR = 1e-3
COV_FLOOR = 0.3
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
MAX_CONDITION = 1e12

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # world -> camera, OpenCV axes (x right, y down, z forward)
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def look_at(eye, target, up=(0.0, 1.0, 0.0), fx=175.0, fy=None, width=96, height=96, cx=None, cy=None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    return Camera(fx, fy or fx, (width - 1) / 2 if cx is None else cx, (height - 1) / 2 if cy is None else cy,
                  R, -R @ eye, width, height)


@dataclass
class RenderStats:
    culled: int = 0
    ill_conditioned: int = 0


# -- spherical harmonics ------------------------------------------------------

def sh_basis(d):
    """Real SH basis up to degree 3 for unit directions (..., 3) -> list of 16 arrays/tensors."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    one = x * 0.0 + SH_C0
    return [
        one,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2.0 * zz - xx - yy), SH_C2[3] * xz, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy), SH_C3[1] * xy * z, SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy), SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3.0 * yy),
    ]


def eval_sh(coeffs, directions) -> Tensor:
    """RGB in [0, 1] from 48 coefficients (column 3k + ch) and unit view directions."""
    coeffs = coeffs if isinstance(coeffs, Tensor) else Tensor(coeffs)
    directions = directions if isinstance(directions, Tensor) else Tensor(directions)
    basis = ad.stack(sh_basis(directions), axis=-1)
    c = ad.reshape(coeffs, (*coeffs.shape[:-1], 16, 3))
    lead = "abcdefgh"[:basis.ndim - 1]
    rgb = ad.einsum(f"{lead}k,{lead}kc->{lead}c", basis, c)
    return ad.clip(rgb + 0.5, 0.0, 1.0)


# -- projection ---------------------------------------------------------------

@dataclass
class Projected:
    means2d: Tensor   # B x n x 2
    conic: Tensor     # B x n x 3 (a, b, c) of the inverse 2D covariance
    cov2d: Tensor     # B x n x 3 (xx, xy, yy), floor included
    depth: np.ndarray
    valid: np.ndarray
    radius: np.ndarray


def _camera_arrays(cameras: list[Camera], dtype):
    R = np.stack([c.rotation for c in cameras]).astype(dtype)
    t = np.stack([c.translation for c in cameras]).astype(dtype)
    K = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cameras], dtype=dtype)
    centres = np.stack([c.center for c in cameras]).astype(dtype)
    return R, t, K, centres


def project(means, quats, scales, cameras: list[Camera], stats: RenderStats | None = None) -> Projected:
    """Project splats (B x n x ...) through one camera per batch row."""
    dt = means.dtype
    R, t, K, _ = _camera_arrays(cameras, dt)
    Rt = Tensor(R, dtype=dt)
    p = ad.einsum("bij,bnj->bni", Rt, means) + Tensor(t[:, None, :], dtype=dt)
    z_raw = p.data[..., 2]
    valid = z_raw > NEAR
    z = ad.where(valid, p[..., 2], 1.0)
    x, y = p[..., 0], p[..., 1]
    inv_z = 1.0 / z
    fx, fy = Tensor(K[:, 0:1], dtype=dt), Tensor(K[:, 1:2], dtype=dt)
    u = fx * x * inv_z + Tensor(K[:, 2:3], dtype=dt)
    v = fy * y * inv_z + Tensor(K[:, 3:4], dtype=dt)
    m2d = ad.stack([u, v], axis=-1)

    zero = x * 0.0
    J = ad.stack([ad.stack([fx * inv_z, zero, -fx * x * inv_z * inv_z], axis=-1),
                  ad.stack([zero, fy * inv_z, -fy * y * inv_z * inv_z], axis=-1)], axis=-2)
    rot = quat_to_matrix(quats)
    M = rot * ad.reshape(scales, (*scales.shape[:-1], 1, 3))
    cov3 = M @ ad.transpose(M, (*range(M.ndim - 2), M.ndim - 1, M.ndim - 2))
    T = J @ ad.reshape(Rt, (Rt.shape[0], 1, 3, 3))
    cov2 = T @ cov3 @ ad.transpose(T, (0, 1, 3, 2))
    a = cov2[..., 0, 0] + COV_FLOOR
    b = cov2[..., 0, 1]
    c = cov2[..., 1, 1] + COV_FLOOR
    det = a * c - b * b
    ad_, bd, cd = a.data, b.data, c.data
    mid = 0.5 * (ad_ + cd)
    disc = np.sqrt(np.maximum(0.25 * (ad_ - cd) ** 2 + bd * bd, 0.0))
    lmax, lmin = mid + disc, mid - disc
    well = (lmin > 0) & (lmax < MAX_CONDITION * np.maximum(lmin, 1e-300)) & np.isfinite(lmax)
    if stats is not None:
        stats.culled += int(np.count_nonzero(~valid))
        stats.ill_conditioned += int(np.count_nonzero(valid & ~well))
    valid = valid & well
    safe_det = ad.where(valid, det, 1.0)
    conic = ad.stack([c / safe_det, -b / safe_det, a / safe_det], axis=-1)
    radius = np.ceil(3.0 * np.sqrt(np.where(valid, lmax, 0.0)))
    return Projected(m2d, conic, ad.stack([a, b, c], axis=-1), z_raw, valid, radius)


# -- rasterisation kernels ----------------------------------------------------

@numba.njit(cache=True)
def _raster_forward(order, m2d, conic, opac, rgb, radius, H, W, img, T_final, last, T_last):
    for y in range(H):
        for x in range(W):
            T_final[y, x] = 1.0
            last[y, x] = -1
            T_last[y, x] = 1.0
    done = np.zeros((H, W), dtype=np.bool_)
    for rank in range(order.shape[0]):
        i = order[rank]
        mx, my, r = m2d[i, 0], m2d[i, 1], radius[i]
        x0 = max(0, int(np.ceil(mx - r)))
        x1 = min(W - 1, int(np.floor(mx + r)))
        y0 = max(0, int(np.ceil(my - r)))
        y1 = min(H - 1, int(np.floor(my + r)))
        a, b, c = conic[i, 0], conic[i, 1], conic[i, 2]
        o = opac[i]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                if done[py, px]:
                    continue
                dx = px - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0.0:
                    continue
                alpha = o * np.exp(power)
                if alpha < ALPHA_MIN:
                    continue
                T = T_final[py, px]
                w = T * alpha
                img[py, px, 0] += w * rgb[i, 0]
                img[py, px, 1] += w * rgb[i, 1]
                img[py, px, 2] += w * rgb[i, 2]
                last[py, px] = rank
                T_last[py, px] = T
                T_new = T * (1.0 - alpha)
                T_final[py, px] = T_new
                if T_new < T_STOP:
                    done[py, px] = True


@numba.njit(cache=True)
def _raster_backward(order, m2d, conic, opac, rgb, radius, H, W, last, T_last, g_img, g_alpha,
                     g_m2d, g_conic, g_opac, g_rgb):
    T_cur = np.empty((H, W))
    started = np.zeros((H, W), dtype=np.bool_)
    S = np.zeros((H, W, 4))
    for rank in range(order.shape[0] - 1, -1, -1):
        i = order[rank]
        mx, my, r = m2d[i, 0], m2d[i, 1], radius[i]
        x0 = max(0, int(np.ceil(mx - r)))
        x1 = min(W - 1, int(np.floor(mx + r)))
        y0 = max(0, int(np.ceil(my - r)))
        y1 = min(H - 1, int(np.floor(my + r)))
        a, b, c = conic[i, 0], conic[i, 1], conic[i, 2]
        o = opac[i]
        gmx = 0.0
        gmy = 0.0
        ga = 0.0
        gb = 0.0
        gc = 0.0
        go = 0.0
        gr0 = 0.0
        gr1 = 0.0
        gr2 = 0.0
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                if rank > last[py, px]:
                    continue
                dx = px - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0.0:
                    continue
                G = np.exp(power)
                alpha = o * G
                if alpha < ALPHA_MIN:
                    continue
                if started[py, px]:
                    T = T_cur[py, px] / (1.0 - alpha)
                else:
                    T = T_last[py, px]
                    started[py, px] = True
                T_cur[py, px] = T
                w = alpha * T
                g0 = g_img[py, px, 0]
                g1 = g_img[py, px, 1]
                g2 = g_img[py, px, 2]
                gA = g_alpha[py, px]
                gr0 += g0 * w
                gr1 += g1 * w
                gr2 += g2 * w
                s0, s1, s2, sA = S[py, px, 0], S[py, px, 1], S[py, px, 2], S[py, px, 3]
                dalpha = T * (g0 * (rgb[i, 0] - s0) + g1 * (rgb[i, 1] - s1) + g2 * (rgb[i, 2] - s2)
                              + gA * (1.0 - sA))
                S[py, px, 0] = alpha * rgb[i, 0] + (1.0 - alpha) * s0
                S[py, px, 1] = alpha * rgb[i, 1] + (1.0 - alpha) * s1
                S[py, px, 2] = alpha * rgb[i, 2] + (1.0 - alpha) * s2
                S[py, px, 3] = alpha + (1.0 - alpha) * sA
                go += dalpha * G
                dpow = dalpha * alpha
                # power = -a dx^2 / 2 - b dx dy - c dy^2 / 2 with dx = px - mx
                gmx += dpow * (a * dx + b * dy)
                gmy += dpow * (b * dx + c * dy)
                ga += -0.5 * dpow * dx * dx
                gb += -dpow * dx * dy
                gc += -0.5 * dpow * dy * dy
        g_m2d[i, 0] += gmx
        g_m2d[i, 1] += gmy
        g_conic[i, 0] += ga
        g_conic[i, 1] += gb
        g_conic[i, 2] += gc
        g_opac[i] += go
        g_rgb[i, 0] += gr0
        g_rgb[i, 1] += gr1
        g_rgb[i, 2] += gr2


def depth_order(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Front-to-back order of valid splats; equal depths keep index order."""
    idx = np.flatnonzero(valid)
    return idx[np.argsort(depth[idx], kind="stable")].astype(np.int64)


def rasterize(proj: Projected, opacity: Tensor, rgb: Tensor, height: int, width: int) -> Tensor:
    """Composite projected splats; returns B x H x W x 4 (rgb, alpha) on the tape."""
    B = proj.means2d.shape[0]
    m2d = proj.means2d.data.astype(np.float64)
    conic = proj.conic.data.astype(np.float64)
    op = opacity.data.reshape(B, -1).astype(np.float64)
    col = rgb.data.astype(np.float64)
    out = np.zeros((B, height, width, 4))
    caches = []
    for bi in range(B):
        order = depth_order(proj.depth[bi], proj.valid[bi])
        img = np.zeros((height, width, 3))
        T_final = np.empty((height, width))
        last = np.empty((height, width), dtype=np.int64)
        T_last = np.empty((height, width))
        _raster_forward(order, m2d[bi], conic[bi], op[bi], col[bi], proj.radius[bi], height, width,
                        img, T_final, last, T_last)
        out[bi, ..., :3] = img
        out[bi, ..., 3] = 1.0 - T_final
        caches.append((order, last, T_last))
    dtype = proj.means2d.dtype

    def backward(g):
        g = g.astype(np.float64)
        gm = np.zeros_like(m2d)
        gcn = np.zeros_like(conic)
        go = np.zeros_like(op)
        gc = np.zeros_like(col)
        for bi, (order, last, T_last) in enumerate(caches):
            if not np.any(g[bi]):
                continue
            _raster_backward(order, m2d[bi], conic[bi], op[bi], col[bi], proj.radius[bi], height, width,
                             last, T_last, np.ascontiguousarray(g[bi, ..., :3]),
                             np.ascontiguousarray(g[bi, ..., 3]), gm[bi], gcn[bi], go[bi], gc[bi])
        return (gm.astype(dtype), gcn.astype(dtype), go.reshape(opacity.shape).astype(dtype), gc.astype(dtype))

    return ad.record("rasterize", out.astype(dtype), (proj.means2d, proj.conic, opacity, rgb), backward)


def render_batch(means, quats, scales, opacity, sh, cameras: list[Camera],
                 stats: RenderStats | None = None) -> Tensor:
    """Render B splat sets (leading axis) through B cameras of equal size -> B x H x W x 4."""
    H, W = cameras[0].height, cameras[0].width
    if any(c.height != H or c.width != W for c in cameras):
        raise ValueError("all cameras in a batch must share the image size")
    proj = project(means, quats, scales, cameras, stats)
    centres = Tensor(_camera_arrays(cameras, means.dtype)[3][:, None, :], dtype=means.dtype)
    offset = means - centres
    # culled splats never reach the rasteriser; keep their direction finite
    far = np.linalg.norm(offset.data, axis=-1, keepdims=True) > 0
    dirs = ad.normalize(ad.where(far, offset, Tensor(np.array([0.0, 0.0, 1.0]), dtype=means.dtype)))
    rgb = eval_sh(sh, dirs)
    return rasterize(proj, opacity, rgb, H, W)


@dataclass
class RenderedImage:
    rgb: np.ndarray    # H x W x 3
    alpha: np.ndarray  # H x W


def composite(splats, camera: Camera, stats: RenderStats | None = None) -> Tensor:
    """Render one SplatFrame through one camera -> H x W x 4 tensor."""
    def lift(x):
        return ad.reshape(x, (1, *x.shape))
    out = render_batch(lift(splats.mu), lift(splats.quat), lift(splats.scale), lift(splats.opacity),
                       lift(splats.sh), [camera], stats)
    return out[0]


def render_image(splats, camera: Camera) -> RenderedImage:
    with ad.no_grad():
        out = composite(splats, camera).data
    return RenderedImage(out[..., :3].copy(), out[..., 3].copy())


# -- image files --------------------------------------------------------------

def save_png(path, rgb: np.ndarray) -> None:
    from PIL import Image
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_raw(path, img: np.ndarray) -> None:
    """Little-endian: width u32, height u32, channels u32, then float32 rows."""
    img = np.asarray(img, dtype="<f4")
    H, W = img.shape[:2]
    C = 1 if img.ndim == 2 else img.shape[2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", W, H, C))
        fh.write(img.tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    W, H, C = struct.unpack_from("<III", blob, 0)
    if len(blob) != 12 + 4 * W * H * C:
        raise ValueError("raw image size does not match its header")
    arr = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float32)
    return arr.reshape(H, W) if C == 1 else arr.reshape(H, W, C)
