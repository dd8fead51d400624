import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pigavatar.anchor_graph import (AnchorSet, active_anchors, anchor_state_bytes, anchor_state_from_bytes,
                                    apply_anchor_update, init_anchors, knn_adjacency, knn_laplacian,
                                    load_anchor_positions, nested_subsets, precondition_anchor_gradient,
                                    save_anchors_ply)
from pigavatar.autodiff import Tensor
from pigavatar.optim import AdamMoments
from pigavatar.proxy import Attachments, build_humanoid


@pytest.fixture(scope="module")
def body():
    return build_humanoid()


def _set_from_points(points, k=3, lam=1.0):
    n = len(points)
    att = Attachments(np.zeros(n, dtype=int), np.full((n, 3), 1 / 3), np.tile(np.eye(3), (n, 1, 1)), points)
    return AnchorSet(Tensor(points.copy()), att, [np.arange(n)], knn_adjacency(points, k), smoothing=lam)


def _brute_knn_adjacency(points, k):
    n = len(points)
    D = np.linalg.norm(points[:, None] - points[None], axis=-1)
    A = np.zeros((n, n))
    for i in range(n):
        cand = [j for j in range(n) if j != i]
        cand.sort(key=lambda j: (D[i, j], j))
        for j in cand[:k]:
            A[i, j] = A[j, i] = 1.0
    return A


def test_small_lod_example(body):
    s = init_anchors(body, 8, seed=0, levels=3, k=3)
    assert [len(x) for x in s.lod_subsets] == [2, 4, 8]
    for a, b in zip(s.lod_subsets, s.lod_subsets[1:]):
        assert set(a) <= set(b)
    np.testing.assert_array_equal(active_anchors(s, 3), np.arange(8))
    np.testing.assert_array_equal(active_anchors(s, 1), s.lod_subsets[0])
    with pytest.raises(ValueError):
        active_anchors(s, 0)
    with pytest.raises(ValueError):
        active_anchors(s, 4)


def test_halving_floor_error(body):
    with pytest.raises(ValueError, match="non-empty"):
        init_anchors(body, 3, seed=0, levels=3)
    with pytest.raises(ValueError):
        init_anchors(body, 0, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 300), st.integers(1, 3), st.integers(0, 10 ** 6))
def test_nested_subset_sizes_and_nesting(n, levels, seed):
    subsets = nested_subsets(n, levels, np.random.default_rng(seed))
    assert len(subsets[-1]) == n
    for a, b in zip(subsets, subsets[1:]):
        assert len(a) == len(b) // 2
        assert np.isin(a, b).all()


def test_same_seed_is_deterministic(body):
    a = init_anchors(body, 200, seed=5)
    b = init_anchors(body, 200, seed=5)
    np.testing.assert_array_equal(a.positions.data, b.positions.data)
    for x, y in zip(a.lod_subsets, b.lod_subsets):
        np.testing.assert_array_equal(x, y)
    assert (a.adjacency != b.adjacency).nnz == 0


def test_anchors_start_on_their_attachments(body):
    s = init_anchors(body, 100, seed=1)
    np.testing.assert_array_equal(s.positions.data, s.attachments.point)


def test_collinear_line_graph():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    A = knn_adjacency(pts, 1).toarray()
    np.testing.assert_array_equal(A.sum(axis=1), [1, 2, 1])


def test_knn_matches_brute_force():
    rng = np.random.default_rng(2)
    for trial in range(20):
        pts = rng.normal(size=(10, 3))
        for k in (1, 3, 8):
            np.testing.assert_array_equal(knn_adjacency(pts, k).toarray(), _brute_knn_adjacency(pts, k))


def test_duplicate_points_break_ties_by_index():
    pts = np.zeros((12, 3))
    pts[6:] = 1.0
    A = knn_adjacency(pts, 2).toarray()
    np.testing.assert_array_equal(A, _brute_knn_adjacency(pts, 2))
    # grid-regular points put many neighbours at equal distance
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    np.testing.assert_array_equal(knn_adjacency(g, 8).toarray(), _brute_knn_adjacency(g, 8))


def test_knn_laplacian_properties():
    pts = np.random.default_rng(3).normal(size=(30, 3))
    L = knn_laplacian(_set_from_points(pts, k=4)).toarray()
    np.testing.assert_allclose(L, L.T)
    np.testing.assert_allclose(L @ np.ones(30), 0.0, atol=1e-12)
    assert np.linalg.eigvalsh(L).min() > -1e-10


def test_weighted_variant_is_symmetric():
    pts = np.random.default_rng(4).normal(size=(25, 3))
    A = knn_adjacency(pts, 4, weighting="gaussian")
    assert abs(A - A.T).max() < 1e-15
    assert ((A > 0) != (knn_adjacency(pts, 4) > 0)).nnz == 0


def test_preconditioner_identities_and_dense_oracle():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(20, 3))
    s = _set_from_points(pts, k=4, lam=0.0)
    g = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(precondition_anchor_gradient(s, g), g)
    s.smoothing = 1.3
    shift = np.tile([0.2, -1.0, 3.0], (20, 1))
    assert np.max(np.abs(precondition_anchor_gradient(s, shift) - shift)) <= 1e-10
    A = np.eye(20) + 1.3 * s.laplacian.toarray()
    dense = np.linalg.solve(A, np.linalg.solve(A, g))
    np.testing.assert_allclose(precondition_anchor_gradient(s, g), dense, atol=1e-6)
    rho, vecs = np.linalg.eigh(s.laplacian.toarray())
    for k in range(20):
        v = np.repeat(vecs[:, k:k + 1], 3, axis=1)
        np.testing.assert_allclose(precondition_anchor_gradient(s, v), v / (1 + 1.3 * rho[k]) ** 2, atol=1e-6)


def test_preconditioner_matrix_is_symmetric():
    for n in (6, 13, 20):
        pts = np.random.default_rng(n).normal(size=(n, 3))
        s = _set_from_points(pts, k=3, lam=0.8)
        M = np.zeros((n, n))
        for j in range(n):
            e = np.zeros((n, 3))
            e[j] = 1.0
            M[:, j] = precondition_anchor_gradient(s, e)[:, 0]
        np.testing.assert_allclose(M, M.T, atol=1e-8)


def test_impulse_reaches_neighbours_and_inactive_anchors(body):
    s = init_anchors(body, 64, seed=6, levels=3, k=8)
    inactive = np.setdiff1d(np.arange(64), active_anchors(s, 1))
    A = s.adjacency.tocsr()
    # raw gradient only on active anchors: inactive graph neighbours still move
    active = active_anchors(s, 1)
    g = np.zeros((64, 3))
    g[active[0]] = [1.0, -2.0, 0.5]
    pg = precondition_anchor_gradient(s, g)
    nbrs = A.indices[A.indptr[active[0]]:A.indptr[active[0] + 1]]
    assert np.all(np.abs(pg[nbrs]).sum(axis=1) > 0)
    touched = np.intersect1d(nbrs, inactive)
    assert len(touched) > 0
    before = s.positions.data.copy()
    apply_anchor_update(s, pg, AdamMoments.like(pg))
    moved = np.any(s.positions.data != before, axis=1)
    assert moved[touched].all()


def test_graph_stays_fixed_after_updates(body):
    s = init_anchors(body, 64, seed=7)
    adj = s.adjacency.copy()
    mom = AdamMoments.like(s.positions.data)
    rng = np.random.default_rng(0)
    for _ in range(5):
        apply_anchor_update(s, precondition_anchor_gradient(s, rng.normal(size=(64, 3))), mom)
    assert (s.adjacency != adj).nnz == 0
    np.testing.assert_array_equal(s.adjacency.indices, adj.indices)


def test_ply_and_state_round_trip(body, tmp_path):
    s = init_anchors(body, 40, seed=8)
    save_anchors_ply(s, tmp_path / "a.ply")
    pos, lod = load_anchor_positions(tmp_path / "a.ply")
    np.testing.assert_array_equal(pos, s.positions.data)
    np.testing.assert_array_equal(lod, s.first_lod())
    assert (lod == 1).sum() == 10 and (lod <= 2).sum() == 20
    blob = anchor_state_bytes(s)
    back = anchor_state_from_bytes(blob, s.positions.data.copy())
    assert anchor_state_bytes(back) == blob
    with pytest.raises(ValueError, match="truncated"):
        anchor_state_from_bytes(blob[:-8], s.positions.data)
    assert isinstance(back.adjacency, sp.csr_matrix)
