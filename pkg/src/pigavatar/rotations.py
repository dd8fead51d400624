"""Quaternion helpers, (w, x, y, z) order, all differentiable through the tape."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def quat_multiply(a, b) -> Tensor:
    """Hamilton product a * b over the last axis."""
    a, b = _t(a), _t(b)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return ad.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q) -> Tensor:
    """Rotation matrix of a unit quaternion (..., 4) -> (..., 3, 3)."""
    q = _t(q)
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return ad.stack([ad.stack(r, axis=-1) for r in rows], axis=-2)


def matrix_to_quaternion(R) -> Tensor:
    """Unit quaternion with w >= 0 for rotation matrices (n, 3, 3).

    Each row picks the numerically largest of the four standard extraction
    formulas, so no division is ever by a small number.
    """
    R = _t(R)
    n = R.shape[0]
    r = [[R[:, i, j] for j in range(3)] for i in range(3)]
    rad = [1 + r[0][0] + r[1][1] + r[2][2], 1 + r[0][0] - r[1][1] - r[2][2],
           1 - r[0][0] + r[1][1] - r[2][2], 1 - r[0][0] - r[1][1] + r[2][2]]
    branch = np.argmax(np.stack([x.data for x in rad], axis=1), axis=1)
    big = [0.5 * ad.sqrt(ad.clip(x, 1e-12, None)) for x in rad]
    inv = [0.25 / b for b in big]
    cands = [
        [big[0], (r[2][1] - r[1][2]) * inv[0], (r[0][2] - r[2][0]) * inv[0], (r[1][0] - r[0][1]) * inv[0]],
        [(r[2][1] - r[1][2]) * inv[1], big[1], (r[0][1] + r[1][0]) * inv[1], (r[0][2] + r[2][0]) * inv[1]],
        [(r[0][2] - r[2][0]) * inv[2], (r[0][1] + r[1][0]) * inv[2], big[2], (r[1][2] + r[2][1]) * inv[2]],
        [(r[1][0] - r[0][1]) * inv[3], (r[0][2] + r[2][0]) * inv[3], (r[1][2] + r[2][1]) * inv[3], big[3]],
    ]
    stacked = ad.stack([ad.stack(c, axis=-1) for c in cands], axis=1)  # n x 4 x 4
    q = stacked[np.arange(n), branch]
    sign = np.where(q.data[:, :1] < 0, -1.0, 1.0)
    return q * Tensor(sign, dtype=q.dtype)


def random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)
