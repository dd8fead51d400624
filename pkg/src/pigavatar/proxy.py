"""Articulated proxy body, barycentric attachments and anchor transport.

The proxy is a procedurally built capsule humanoid with linear blend
skinning, a 2-vector shape code and per-joint axis-angle poses. It only
moves anchors around; it never constrains the reconstructed geometry.
Units are centimetres, y is up.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

JOINT_NAMES = ("pelvis", "chest", "neck", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow", "l_hip", "r_hip")
PARENTS = np.array([-1, 0, 1, 1, 3, 1, 5, 0, 0])
DEGENERATE_AREA = 1e-12


@dataclass
class ProxyModel:
    template_vertices: np.ndarray  # V x 3
    triangles: np.ndarray  # F x 3
    joints: np.ndarray  # J x 3 rest positions
    parents: np.ndarray  # J, root has -1
    skinning_weights: np.ndarray  # V x J
    shape_basis: np.ndarray  # V x 3 x B
    joint_shape_basis: np.ndarray  # J x 3 x B
    segment: np.ndarray = field(default=None)  # V, segment id per vertex (texturing only)

    def __post_init__(self):
        w = self.skinning_weights
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("skinning weight rows must be nonnegative and sum to 1")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ValueError("joint tree needs exactly one root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, len(self.parents))):
            raise ValueError("parents must precede children (acyclic tree)")
        if self.segment is None:
            self.segment = np.zeros(len(self.template_vertices), dtype=np.int64)

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def num_betas(self) -> int:
        return self.shape_basis.shape[2]

    def shaped(self, beta) -> tuple[np.ndarray, np.ndarray]:
        beta = np.asarray(beta, dtype=np.float64)
        return self.template_vertices + self.shape_basis @ beta, self.joints + self.joint_shape_basis @ beta


@dataclass
class ModelParams:
    beta: np.ndarray  # B
    poses: np.ndarray  # T x J x 3 axis-angle
    translations: np.ndarray  # T x 3

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[0] < 1:
            raise ValueError("poses must be T x J x 3 with T >= 1")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError("axis-angle poses must be finite")

    @property
    def num_frames(self) -> int:
        return self.poses.shape[0]


@dataclass
class Attachments:
    """Fixed per-anchor binding: triangle, barycentrics, canonical frame and point."""
    triangle: np.ndarray  # N
    barycentric: np.ndarray  # N x 3
    frame: np.ndarray  # N x 3 x 3, columns (t | b | n)
    point: np.ndarray  # N x 3, x_init

    def __len__(self):
        return len(self.triangle)

    def subset(self, idx) -> "Attachments":
        return Attachments(self.triangle[idx], self.barycentric[idx], self.frame[idx], self.point[idx])


# -- procedural humanoid -----------------------------------------------------

def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _capsule(a, b, radii, n_around=16, n_body=8, n_cap=4):
    """Closed capsule from ``a`` to ``b`` with elliptic cross-section; outward winding.

    Returns vertices, faces and the axial coordinate (0 at ``a``, 1 at ``b``).
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = b - a
    length = np.linalg.norm(d)
    d /= length
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, d)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    ru, rv = radii
    rcap = 0.5 * (ru + rv)
    rings = []  # (axial offset from a, radial scale)
    for k in range(1, n_cap + 1):
        phi = -0.5 * np.pi + 0.5 * np.pi * k / (n_cap + 1)
        rings.append((rcap * np.sin(phi), np.cos(phi)))
    for k in range(n_body):
        rings.append((length * k / (n_body - 1), 1.0))
    for k in range(n_cap, 0, -1):
        phi = 0.5 * np.pi - 0.5 * np.pi * k / (n_cap + 1)
        rings.append((length + rcap * np.sin(phi), np.cos(phi)))
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts = [a - d * rcap]
    axial = [-rcap / length]
    for off, rho in rings:
        for t in ang:
            verts.append(a + d * off + rho * (ru * np.cos(t) * u + rv * np.sin(t) * v))
            axial.append(off / length)
    verts.append(b + d * rcap)
    axial.append(1.0 + rcap / length)
    faces = []
    nr = len(rings)
    ring = lambda i, j: 1 + i * n_around + (j % n_around)
    for j in range(n_around):
        faces.append((0, ring(0, j + 1), ring(0, j)))
    for i in range(nr - 1):
        for j in range(n_around):
            faces.append((ring(i, j), ring(i, j + 1), ring(i + 1, j + 1)))
            faces.append((ring(i, j), ring(i + 1, j + 1), ring(i + 1, j)))
    top = 1 + nr * n_around
    for j in range(n_around):
        faces.append((top, ring(nr - 1, j), ring(nr - 1, j + 1)))
    return np.array(verts), np.array(faces, dtype=np.int64), np.array(axial)


def build_humanoid(n_around: int = 16, n_body: int = 8, n_cap: int = 4) -> ProxyModel:
    """Eight-capsule A-pose humanoid, 9 joints, 2 shape blendshapes (scale, torso width)."""
    c = np.cos(np.radians(45.0))
    joints = np.array([
        [0.0, 95.0, 0.0], [0.0, 120.0, 0.0], [0.0, 148.0, 0.0],
        [17.0, 143.0, 0.0], [17.0 + 28 * c, 143.0 - 28 * c, 0.0],
        [-17.0, 143.0, 0.0], [-17.0 - 28 * c, 143.0 - 28 * c, 0.0],
        [9.0, 90.0, 0.0], [-9.0, 90.0, 0.0],
    ])
    lw = joints[4] + 24 * np.array([c, -c, 0.0])
    rw = joints[6] + 24 * np.array([-c, -c, 0.0])
    # (start, end, radii, own joint, parent-side joint, child-side joint)
    segments = [
        ((0, 88, 0), (0, 140, 0), (15.0, 10.0), None, None, None),  # torso, custom weights
        ((0, 156, 0), (0, 166, 0), (9.0, 9.0), 2, None, None),  # head
        (joints[3], joints[4], (5.0, 5.0), 3, 1, 4),
        (joints[4], lw, (4.0, 4.0), 4, 3, None),
        (joints[5], joints[6], (5.0, 5.0), 5, 1, 6),
        (joints[6], rw, (4.0, 4.0), 6, 5, None),
        ((9, 88, 0), (9, 6, 0), (7.0, 7.0), 7, 0, None),
        ((-9, 88, 0), (-9, 6, 0), (7.0, 7.0), 8, 0, None),
    ]
    J = len(joints)
    all_v, all_f, all_w, seg_id, s_basis = [], [], [], [], []
    offset = 0
    for sid, (a, b, radii, own, par, child) in enumerate(segments):
        v, f, s = _capsule(a, b, radii, n_around, n_body, n_cap)
        w = np.zeros((len(v), J))
        if own is None:
            hi = _smoothstep((v[:, 1] - 104.0) / 20.0)
            w[:, 1] = hi
            w[:, 0] = 1.0 - hi
        else:
            w[:, own] = 1.0
            if par is not None:
                t = np.clip(s / 0.15, 0.0, 1.0)
                share = 0.5 * (1.0 - t)
                w[:, par] += share
                w[:, own] -= share
            if child is not None:
                t = np.clip((s - 0.85) / 0.15, 0.0, 1.0)
                share = 0.5 * t
                w[:, child] += share
                w[:, own] -= share
        basis = np.zeros((len(v), 3, 2))
        basis[:, :, 0] = 0.1 * v
        if sid == 0:
            basis[:, 0, 1] = 0.1 * v[:, 0]
        elif sid in (2, 3, 4, 5):
            basis[:, 0, 1] = 0.1 * 17.0 * np.sign(v[:, 0].mean())
        all_v.append(v)
        all_f.append(f + offset)
        all_w.append(w)
        seg_id.append(np.full(len(v), sid))
        s_basis.append(basis)
        offset += len(v)
    jb = np.zeros((J, 3, 2))
    jb[:, :, 0] = 0.1 * joints
    for j in (3, 4, 5, 6):
        jb[j, 0, 1] = 0.1 * 17.0 * np.sign(joints[j, 0])
    return ProxyModel(np.concatenate(all_v), np.concatenate(all_f), joints, PARENTS.copy(),
                      np.concatenate(all_w), np.concatenate(s_basis), jb, np.concatenate(seg_id))


# -- kinematics ---------------------------------------------------------------

_SKEW = np.zeros((3, 3, 3))
# K(w)_{ab} = sum_k _SKEW[k, a, b] w_k, i.e. K(w) x = w x x
_SKEW[0, 1, 2], _SKEW[0, 2, 1] = -1.0, 1.0
_SKEW[1, 0, 2], _SKEW[1, 2, 0] = 1.0, -1.0
_SKEW[2, 0, 1], _SKEW[2, 1, 0] = -1.0, 1.0


def rodrigues(omega: Tensor) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3), smooth through zero."""
    omega = omega if isinstance(omega, Tensor) else Tensor(omega)
    s = ad.sum_(omega * omega, axis=-1)
    big = s.data > 1e-6
    safe = ad.where(big, s, np.ones_like(s.data))
    th = ad.sqrt(safe)
    a_big = ad.sin(th) / th
    b_big = (1.0 - ad.cos(th)) / safe
    s2 = s * s
    a_small = 1.0 - s * (1.0 / 6.0) + s2 * (1.0 / 120.0)
    b_small = 0.5 - s * (1.0 / 24.0) + s2 * (1.0 / 720.0)
    A = ad.where(big, a_big, a_small)
    B = ad.where(big, b_big, b_small)
    K = ad.einsum("...k,kab->...ab".replace("...", "z"), omega.reshape(-1, 3), Tensor(_SKEW, dtype=omega.dtype))
    K = K.reshape(*omega.shape[:-1], 3, 3)
    outer = ad.einsum("za,zb->zab", omega.reshape(-1, 3), omega.reshape(-1, 3)).reshape(*omega.shape[:-1], 3, 3)
    eye = np.eye(3, dtype=omega.dtype)
    c0 = (1.0 - B * s).reshape(*s.shape, 1, 1)
    return c0 * Tensor(eye) + A.reshape(*s.shape, 1, 1) * K + B.reshape(*s.shape, 1, 1) * outer


def skinning_transforms(proxy: ProxyModel, beta, theta) -> tuple[Tensor, Tensor, Tensor]:
    """Per-joint affine maps x -> M_j x + c_j of the posed skeleton (no global translation)."""
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    dt = theta.dtype
    J = proxy.num_joints
    joints = Tensor(proxy.joints, dtype=dt) + ad.einsum("jab,b->ja", Tensor(proxy.joint_shape_basis, dtype=dt), beta)
    R = rodrigues(theta.reshape(J, 3))
    world_R = [None] * J
    world_t = [None] * J
    for j in range(J):
        p = proxy.parents[j]
        Rj = R[j]
        if p < 0:
            world_R[j] = Rj
            world_t[j] = joints[j]
        else:
            world_R[j] = world_R[p] @ Rj
            world_t[j] = world_t[p] + ad.einsum("ab,b->a", world_R[p], joints[j] - joints[p])
    M = ad.stack(world_R, axis=0)
    t = ad.stack(world_t, axis=0)
    c = t - ad.einsum("jab,jb->ja", M, joints)
    return M, c, joints


def pose_mesh(proxy: ProxyModel, beta, theta, translation=None) -> Tensor:
    """LBS(template + shape_basis . beta, theta) + translation; differentiable in beta and theta."""
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    dt = theta.dtype
    verts = Tensor(proxy.template_vertices, dtype=dt) + ad.einsum(
        "vab,b->va", Tensor(proxy.shape_basis, dtype=dt), beta)
    M, c, _ = skinning_transforms(proxy, beta, theta)
    W = Tensor(proxy.skinning_weights, dtype=dt)
    blended = ad.einsum("vj,jab->vab", W, M)
    posed = ad.einsum("vab,vb->va", blended, verts) + W @ c
    if translation is not None:
        posed = posed + translation
    return posed


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_surface(vertices: np.ndarray, faces: np.ndarray, count: int, rng: np.random.Generator):
    """Area-weighted uniform surface samples: (triangle ids, barycentrics)."""
    areas = triangle_areas(vertices, faces)
    tri = rng.choice(len(faces), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return tri, bary


def surface_frame(posed_vertices, triangles: np.ndarray, tri_ids, bary) -> tuple[Tensor, Tensor]:
    """Barycentric point and local frame [t | b | n] (columns) on the posed mesh.

    n is the unit face normal, t the first edge made orthogonal to n, b = n x t.
    """
    pv = posed_vertices if isinstance(posed_vertices, Tensor) else Tensor(posed_vertices)
    tri_ids = np.asarray(tri_ids)
    corners = np.asarray(triangles)[tri_ids]  # n x 3
    v0 = ad.take(pv, corners[:, 0])
    v1 = ad.take(pv, corners[:, 1])
    v2 = ad.take(pv, corners[:, 2])
    e1 = v1 - v0
    e2 = v2 - v0
    nrm = ad.cross(e1, e2)
    area = 0.5 * np.linalg.norm(nrm.data, axis=-1)
    bad = np.flatnonzero(area < DEGENERATE_AREA)
    if len(bad):
        raise ValueError(f"degenerate triangle {int(tri_ids[bad[0]])} (area {area[bad[0]]:.3g})")
    n = ad.normalize(nrm)
    t = ad.normalize(e1 - n * ad.dot(e1, n, keepdims=True))
    b = ad.cross(n, t)
    bary_t = Tensor(np.asarray(bary), dtype=pv.dtype)
    point = v0 * bary_t[:, 0:1] + v1 * bary_t[:, 1:2] + v2 * bary_t[:, 2:3]
    frame = ad.stack([t, b, n], axis=-1)
    return point, frame


def make_attachments(vertices: np.ndarray, triangles: np.ndarray, tri_ids, bary) -> Attachments:
    with ad.no_grad():
        point, frame = surface_frame(Tensor(vertices), triangles, tri_ids, bary)
    return Attachments(np.asarray(tri_ids), np.asarray(bary, dtype=np.float64), frame.data.copy(), point.data.copy())


def transport_rotation(canonical_frame, posed_frame) -> Tensor:
    """R = posed_frame . canonical_frame^T (batched)."""
    cf = canonical_frame if isinstance(canonical_frame, Tensor) else Tensor(canonical_frame)
    pf = posed_frame if isinstance(posed_frame, Tensor) else Tensor(posed_frame)
    return ad.einsum("nac,nbc->nab", pf, cf)


def transport_anchor(anchor, x_init, posed_point, rotation) -> Tensor:
    """x_init(theta) + R (x - x_init)."""
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
    offset = anchor - Tensor(np.asarray(x_init), dtype=anchor.dtype)
    return posed_point + ad.einsum("nab,nb->na", rotation, offset)


def transport(posed_vertices, triangles, attachments: Attachments, anchors) -> tuple[Tensor, Tensor]:
    """Posed anchor positions and per-anchor transport rotations."""
    point, frame = surface_frame(posed_vertices, triangles, attachments.triangle, attachments.barycentric)
    R = transport_rotation(Tensor(attachments.frame, dtype=point.dtype), frame)
    return transport_anchor(anchors, attachments.point, point, R), R


def apply_model_refinement(params_init: ModelParams, delta_beta, delta_theta) -> ModelParams:
    delta_beta = np.asarray(delta_beta, dtype=np.float64)
    delta_theta = np.asarray(delta_theta, dtype=np.float64).reshape(params_init.poses.shape)
    if delta_beta.shape != params_init.beta.shape:
        raise ValueError("delta_beta shape mismatch")
    return replace(params_init, beta=params_init.beta + delta_beta, poses=params_init.poses + delta_theta)


# -- interchange formats -------------------------------------------------------

_SIDECAR_MAGIC = b"PIGPRXY1"


def save_proxy(proxy: ProxyModel, obj_path, sidecar_path) -> None:
    """OBJ for the template mesh plus a little-endian binary sidecar:

    magic, V J B : u32, parents J x i32, joints J x 3 f64, weights V x J f64,
    shape_basis V x 3 x B f64, joint_shape_basis J x 3 x B f64, segment V x i32.
    """
    with open(obj_path, "w") as fh:
        for v in proxy.template_vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in proxy.triangles:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    V, J, B = len(proxy.template_vertices), proxy.num_joints, proxy.num_betas
    with open(sidecar_path, "wb") as fh:
        fh.write(_SIDECAR_MAGIC)
        fh.write(struct.pack("<3I", V, J, B))
        fh.write(proxy.parents.astype("<i4").tobytes())
        for arr in (proxy.joints, proxy.skinning_weights, proxy.shape_basis, proxy.joint_shape_basis):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(proxy.segment.astype("<i4").tobytes())


def load_proxy(obj_path, sidecar_path) -> ProxyModel:
    verts, faces = [], []
    with open(obj_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    blob = open(sidecar_path, "rb").read()
    if blob[:8] != _SIDECAR_MAGIC:
        raise ValueError("not a proxy sidecar file")
    V, J, B = struct.unpack_from("<3I", blob, 8)
    off = 20

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * np.dtype(dtype).itemsize
        return arr.astype(dtype.lstrip("<"))

    parents = take("<i4", J, (J,)).astype(np.int64)
    joints = take("<f8", J * 3, (J, 3))
    weights = take("<f8", V * J, (V, J))
    basis = take("<f8", V * 3 * B, (V, 3, B))
    jbasis = take("<f8", J * 3 * B, (J, 3, B))
    segment = take("<i4", V, (V,)).astype(np.int64)
    return ProxyModel(np.array(verts), np.array(faces, dtype=np.int64), joints, parents,
                      weights, basis, jbasis, segment)


def save_poses_csv(poses: np.ndarray, path) -> None:
    """One row per frame: frame index then J x 3 axis-angle values."""
    T, J, _ = poses.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"{JOINT_NAMES[j] if j < len(JOINT_NAMES) else j}_{ax}"
                                for j in range(J) for ax in "xyz"])
        for t in range(T):
            w.writerow([t] + [repr(float(x)) for x in poses[t].ravel()])


def load_poses_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(x) for x in row[1:]] for row in rows])
    return data.reshape(len(rows), -1, 3)
