"""Canonical anchors with nested level-of-detail subsets and a fixed KNN graph."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.sparse.linalg import splu

from .autodiff import Tensor
from .linalg import SolveStats, graph_laplacian, sobolev_cg
from .optim import AdamMoments, adam_update
from .proxy import Attachments, ProxyModel, make_attachments, sample_surface


@dataclass
class AnchorSet:
    positions: Tensor                 # N x 3, learnable
    attachments: Attachments
    lod_subsets: list[np.ndarray]     # coarse -> fine, last one is every index
    adjacency: sp.csr_matrix          # symmetric 0/1 (or weighted) KNN graph
    learning_rate: float = 2e-3
    smoothing: float = 1.0
    stats: SolveStats = field(default_factory=SolveStats)
    _lap: sp.csr_matrix | None = field(default=None, repr=False)
    _factor: object = field(default=None, repr=False)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def num_lods(self) -> int:
        return len(self.lod_subsets)

    @property
    def laplacian(self) -> sp.csr_matrix:
        if self._lap is None:
            self._lap = graph_laplacian(self.adjacency)
        return self._lap

    def first_lod(self) -> np.ndarray:
        """1-based LOD at which each anchor first becomes active."""
        level = np.full(len(self), self.num_lods, dtype=np.int64)
        for l in range(self.num_lods - 1, -1, -1):
            level[self.lod_subsets[l]] = l + 1
        return level


def lod_sizes(count: int, levels: int) -> list[int]:
    sizes = [count]
    for _ in range(levels - 1):
        sizes.append(sizes[-1] // 2)
    sizes.reverse()
    if sizes[0] < 1:
        raise ValueError(f"{count} anchors cannot be halved into {levels} non-empty LOD subsets")
    return sizes


def nested_subsets(count: int, levels: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Prefixes of one seeded permutation, so each level is a uniform subsample of the next."""
    sizes = lod_sizes(count, levels)
    perm = rng.permutation(count)
    return [np.sort(perm[:s]) for s in sizes]


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """(N, k) neighbour indices ordered by (distance, index), excluding self."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or n <= k:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={n}")
    tree = cKDTree(points)
    q = min(n, k + 5)
    dist, idx = tree.query(points, k=q)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d, j = dist[i], idx[i]
        keep = j != i
        d, j = d[keep], j[keep]
        order = np.lexsort((j, d))
        d, j = d[order], j[order]
        # a tie straddling the query horizon needs every point at that radius
        if q < n and d[k - 1] >= dist[i, -1]:
            j = np.array(tree.query_ball_point(points[i], d[k - 1] * (1 + 1e-12) + 1e-300), dtype=np.int64)
            j = j[j != i]
            d = np.linalg.norm(points[j] - points[i], axis=1)
            order = np.lexsort((j, d))
            j = j[order]
        out[i] = j[:k]
    return out


def knn_adjacency(points: np.ndarray, k: int = 8, weighting: str = "uniform") -> sp.csr_matrix:
    """Edge-union symmetrised KNN graph; ``weighting="gaussian"`` uses exp(-d^2 / h^2)."""
    nbr = knn_edges(points, k)
    n = len(points)
    rows = np.repeat(np.arange(n), k)
    cols = nbr.ravel()
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A = ((A + A.T) > 0).astype(np.float64).tocsr()
    if weighting == "gaussian":
        coo = A.tocoo()
        d2 = np.sum((points[coo.row] - points[coo.col]) ** 2, axis=1)
        h2 = max(d2.mean(), 1e-12)
        A = sp.csr_matrix((np.exp(-d2 / h2), (coo.row, coo.col)), shape=(n, n))
    elif weighting != "uniform":
        raise ValueError(f"unknown KNN weighting {weighting!r}")
    return A


def init_anchors(proxy: ProxyModel, count: int, seed: int, levels: int = 3, k: int = 8,
                 weighting: str = "uniform", learning_rate: float = 2e-3, smoothing: float = 1.0,
                 dtype=np.float64) -> AnchorSet:
    if count < 1:
        raise ValueError("anchor count must be >= 1")
    lod_sizes(count, levels)  # fail before sampling
    rng = np.random.default_rng(seed)
    verts, tris = proxy.template_vertices, proxy.triangles
    tri, bary = sample_surface(verts, tris, count, rng)
    att = make_attachments(verts, tris, tri, bary)
    subsets = nested_subsets(count, levels, rng)
    adj = knn_adjacency(att.point, k, weighting)
    pos = Tensor(att.point.astype(dtype), requires_grad=True, name="anchors")
    return AnchorSet(pos, att, subsets, adj, learning_rate, smoothing)


def knn_laplacian(anchors: AnchorSet) -> sp.csr_matrix:
    return anchors.laplacian


def precondition_anchor_gradient(anchors: AnchorSet, raw_gradient: np.ndarray, method: str = "cg") -> np.ndarray:
    """(I + lam L_knn)^-2 applied per coordinate.

    ``method="cg"`` runs two CG solves; ``"direct"`` reuses a sparse LU
    factorisation of the (fixed) graph operator.
    """
    raw_gradient = np.asarray(raw_gradient)
    if raw_gradient.shape != (len(anchors), 3):
        raise ValueError(f"anchor gradient must be ({len(anchors)}, 3), got {raw_gradient.shape}")
    if method == "cg":
        return sobolev_cg(anchors.laplacian, anchors.smoothing, raw_gradient, stats=anchors.stats)
    if method != "direct":
        raise ValueError(f"unknown anchor solver {method!r}")
    if anchors.smoothing == 0:
        return raw_gradient.copy()
    if anchors._factor is None:
        A = sp.identity(len(anchors), format="csc") + anchors.smoothing * anchors.laplacian.tocsc()
        anchors._factor = splu(A)
    y = anchors._factor.solve(raw_gradient.astype(np.float64))
    return anchors._factor.solve(y).astype(raw_gradient.dtype, copy=False)


def apply_anchor_update(anchors: AnchorSet, preconditioned_gradient: np.ndarray, moments: AdamMoments,
                        optimizer: str = "adam") -> None:
    adam_update(anchors.positions.data, preconditioned_gradient, moments, anchors.learning_rate, optimizer)


def active_anchors(anchors: AnchorSet, lod: int) -> np.ndarray:
    if not 1 <= lod <= anchors.num_lods:
        raise ValueError(f"LOD {lod} outside 1..{anchors.num_lods}")
    return anchors.lod_subsets[lod - 1]


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8", "int": "<i4",
              "int32": "<i4", "uint": "<u4", "uint32": "<u4", "uchar": "u1", "uint8": "u1",
              "short": "<i2", "ushort": "<u2", "char": "i1"}


def write_ply(path, columns: dict[str, np.ndarray]) -> None:
    """Binary little-endian vertex-only PLY; each value array becomes one property."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    kinds = {np.dtype("<f4"): "float", np.dtype("<f8"): "double", np.dtype("<i4"): "int",
             np.dtype("<u4"): "uint", np.dtype("u1"): "uchar"}
    dtype = []
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name in names:
        dt = np.dtype(columns[name].dtype).newbyteorder("<")
        if dt not in kinds:
            dt = np.dtype("<f4") if dt.kind == "f" else np.dtype("<i4")
        dtype.append((name, dt))
        header.append(f"property {kinds[dt]} {name}")
    header.append("end_header")
    rec = np.empty(n, dtype=dtype)
    for name in names:
        rec[name] = columns[name]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ValueError("not a PLY file")
    lines = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError("only binary little-endian PLY is supported")
    n = 0
    dtype = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            dtype.append((parts[2], _PLY_TYPES[parts[1]]))
    rec = np.frombuffer(blob, dtype=np.dtype(dtype), count=n, offset=end + len(b"end_header\n"))
    return {name: rec[name].copy() for name, _ in dtype}


def save_anchors_ply(anchors: AnchorSet, path) -> None:
    p = anchors.positions.data
    write_ply(path, {"x": p[:, 0].astype("<f8"), "y": p[:, 1].astype("<f8"), "z": p[:, 2].astype("<f8"),
                     "lod": anchors.first_lod().astype("<i4")})


def load_anchor_positions(path) -> tuple[np.ndarray, np.ndarray]:
    cols = read_ply(path)
    return np.stack([cols["x"], cols["y"], cols["z"]], axis=1), cols["lod"]


_ANCHOR_MAGIC = b"PIGANCH1"


def anchor_state_bytes(anchors: AnchorSet) -> bytes:
    """Fixed parts of an anchor set (attachments, subsets, graph) as bytes."""
    att = anchors.attachments
    adj = anchors.adjacency.tocsr()
    parts = [_ANCHOR_MAGIC, struct.pack("<III", len(anchors), anchors.num_lods, adj.nnz)]
    parts += [struct.pack("<I", len(s)) for s in anchors.lod_subsets]
    arrays = [att.triangle.astype("<i8"), att.barycentric.astype("<f8"), att.frame.astype("<f8"),
              att.point.astype("<f8"), *[s.astype("<i8") for s in anchors.lod_subsets],
              adj.indptr.astype("<i8"), adj.indices.astype("<i8"), adj.data.astype("<f8")]
    parts += [a.tobytes() for a in arrays]
    return b"".join(parts)


def anchor_state_from_bytes(blob: bytes, positions: np.ndarray, learning_rate: float = 2e-3,
                            smoothing: float = 1.0) -> AnchorSet:
    if blob[:8] != _ANCHOR_MAGIC:
        raise ValueError("not an anchor state block")
    off = 8
    n, L, nnz = struct.unpack_from("<III", blob, off)
    off += 12
    sizes = struct.unpack_from(f"<{L}I", blob, off)
    off += 4 * L

    def take(dt, count, shape):
        nonlocal off
        size = np.dtype(dt).itemsize * count
        if off + size > len(blob):
            raise ValueError("truncated anchor state block")
        a = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += size
        return a

    tri = take("<i8", n, (n,))
    bary = take("<f8", 3 * n, (n, 3))
    frame = take("<f8", 9 * n, (n, 3, 3))
    point = take("<f8", 3 * n, (n, 3))
    subsets = [take("<i8", s, (s,)) for s in sizes]
    indptr = take("<i8", n + 1, (n + 1,))
    indices = take("<i8", nnz, (nnz,))
    data = take("<f8", nnz, (nnz,))
    adj = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    pos = Tensor(positions, requires_grad=True, name="anchors")
    return AnchorSet(pos, Attachments(tri, bary, frame, point), subsets, adj, learning_rate, smoothing)
