import filecmp

import numpy as np
import pytest

from pigavatar.synth import (SceneSpec, build_ground_truth, generate, load_dataset, perturb_poses, posed_points,
                             ring_cameras, save_dataset)


def _small(**kw):
    base = dict(frames=3, image_size=40, focal=73.0, surface_points=4000, held_out_angles=(22.5,))
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="module")
def small():
    return generate(_small())


def test_static_script_gives_identical_frames():
    ds = generate(_small(motion_scale=0.0, train_cameras=2, held_out_angles=()))
    for t in range(1, 3):
        np.testing.assert_array_equal(ds.images[:, t], ds.images[:, 0])
        np.testing.assert_array_equal(ds.alphas[:, t], ds.alphas[:, 0])


def test_ring_layout_uses_equal_steps():
    spec = SceneSpec()
    cams = ring_cameras(np.arange(8) * 45.0, spec)
    centres = np.array([c.center for c in cams])
    ang = np.degrees(np.arctan2(centres[:, 0], centres[:, 2])) % 360
    np.testing.assert_allclose(np.diff(ang), 45.0, atol=1e-9)
    np.testing.assert_allclose(np.hypot(centres[:, 0], centres[:, 2]), spec.ring_radius, atol=1e-9)
    for c in cams:  # every camera looks at the body
        p = c.rotation @ np.array([0.0, spec.target_height, 0.0]) + c.translation
        np.testing.assert_allclose(p[:2], 0.0, atol=1e-9)


def test_clothing_widens_side_silhouette():
    kw = dict(frames=1, train_cameras=4, held_out_angles=(), motion_scale=0.0)
    on = generate(_small(clothing=True, **kw))
    off = generate(_small(clothing=False, **kw))
    # cameras 1 and 3 look from the sides
    for c in (1, 3):
        assert on.masks[c, 0].sum() > off.masks[c, 0].sum() + 10


def test_pose_noise_statistics():
    poses = np.zeros((1000, 9, 3))
    np.testing.assert_array_equal(perturb_poses(poses, 0.0, 1), poses)
    noisy = perturb_poses(poses[:371], 0.1, 1)  # 371 * 27 > 10^4 draws
    assert noisy.size >= 10_000
    assert abs(noisy.std() - 0.1) < 0.01
    assert not np.array_equal(perturb_poses(poses, 0.1, 1), perturb_poses(poses, 0.1, 2))
    np.testing.assert_array_equal(perturb_poses(poses, 0.1, 3), perturb_poses(poses, 0.1, 3))
    with pytest.raises(ValueError):
        perturb_poses(poses, -1.0, 0)


def test_masks_are_inside_projected_geometry(small):
    spec = small.spec
    gt = build_ground_truth(spec, np.random.default_rng(spec.seed))
    for t in range(spec.frames):
        pts = posed_points(gt, spec, small.poses[t], t)
        for ci, cam in enumerate(small.cameras):
            p = pts @ cam.rotation.T + cam.translation
            u = cam.fx * p[:, 0] / p[:, 2] + cam.cx
            v = cam.fy * p[:, 1] / p[:, 2] + cam.cy
            ys, xs = np.nonzero(small.masks[ci, t])
            margin = 3.0  # splat footprint in pixels
            assert xs.min() >= u.min() - margin and xs.max() <= u.max() + margin
            assert ys.min() >= v.min() - margin and ys.max() <= v.max() + margin


def test_images_are_eight_bit_levels(small):
    np.testing.assert_array_equal(np.round(small.images * 255) / 255, small.images)
    assert small.masks.any()


def test_dataset_files_are_deterministic(small, tmp_path):
    save_dataset(small, tmp_path / "a")
    save_dataset(generate(_small()), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files
    for sub in ("images", "alpha"):
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, names, shallow=False)
        assert not mismatch and not errors
    back = load_dataset(tmp_path / "a")
    np.testing.assert_array_equal(back.images, small.images)
    np.testing.assert_array_equal(back.alphas, small.alphas)
    np.testing.assert_array_equal(back.poses, small.poses)
    assert back.spec == small.spec
    assert back.test_cams == small.test_cams
    for a, b in zip(back.cameras, small.cameras):
        np.testing.assert_array_equal(a.rotation, b.rotation)
