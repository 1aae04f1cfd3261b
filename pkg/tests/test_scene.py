import numpy as np
import pytest

from activenerf.scene import (CameraPose, PosedImage, Primitive, Scene, default_scene, generate_dataset, load_scene,
                              look_at, oracle_render, query_scene, random_scene, sample_sphere_views, save_scene)


def test_query_empty_scene_returns_background():
    scene = Scene([], [0.2, 0.3, 0.4], 1.0)
    sigma, color = query_scene(scene, [0.1, -0.5, 0.3])
    assert sigma == 0.0
    np.testing.assert_array_equal(color, [0.2, 0.3, 0.4])


def test_query_inside_and_outside_sphere(sphere_scene):
    sigma, color = query_scene(sphere_scene, [0.0, 0.0, 0.0])
    assert sigma == 2.0
    np.testing.assert_array_equal(color, [1.0, 0.0, 0.0])
    sigma, color = query_scene(sphere_scene, [5.0, 0.0, 0.0])
    assert sigma == 0.0
    np.testing.assert_array_equal(color, sphere_scene.background_color)


def test_overlap_sums_density_and_weights_color():
    scene = Scene([Primitive("sphere", [0, 0, 0], 0.5, 1.0, [1, 0, 0]),
                   Primitive("box", [0, 0, 0], 0.5, 3.0, [0, 0, 1])], [0, 0, 0], 1.0)
    sigma, color = query_scene(scene, [0.1, 0.1, 0.1])
    assert sigma == 4.0
    np.testing.assert_allclose(color, [0.25, 0.0, 0.75])


def test_scene_validation():
    with pytest.raises(ValueError):
        Primitive("sphere", [0, 0, 0], 0.5, -1.0, [1, 0, 0])
    with pytest.raises(ValueError):
        Primitive("sphere", [0, 0, 0], 0.5, 1.0, [1.5, 0, 0])
    with pytest.raises(ValueError):
        Primitive("cone", [0, 0, 0], 0.5, 1.0, [1, 0, 0])
    with pytest.raises(ValueError):
        Scene([Primitive("sphere", [0.8, 0, 0], 0.5, 1.0, [1, 0, 0])], [0, 0, 0], 1.0)


def test_textures_stay_in_unit_range():
    rng = np.random.default_rng(0)
    for tex in ("gradient_x", "gradient_y", "gradient_z", "checker"):
        p = Primitive("box", [0, 0, 0], [0.3, 0.4, 0.5], 1.0, [0.1, 0.9, 0.5], texture=tex)
        c = p.color_at(rng.uniform(-1, 1, size=(500, 3)))
        assert c.min() >= 0.0 and c.max() <= 1.0


def test_scene_file_round_trip(tmp_path):
    scene = default_scene()
    save_scene(scene, tmp_path / "s.yaml")
    back = load_scene(tmp_path / "s.yaml")
    assert back.to_dict() == scene.to_dict()
    pts = np.random.default_rng(1).uniform(-1.4, 1.4, size=(2000, 3))
    s1, c1 = query_scene(scene, pts)
    s2, c2 = query_scene(back, pts)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(c1, c2)


def test_random_scene_is_bounded_and_deterministic():
    a, b = random_scene(3), random_scene(3)
    assert a.to_dict() == b.to_dict()
    for p in a.primitives:
        assert np.linalg.norm(p.center) + p.extent <= a.bounding_radius + 1e-9


def test_camera_pose_validation():
    with pytest.raises(ValueError):
        CameraPose([0, 0, 0], np.diag([1.0, 1.0, -1.0]), 10.0, 4, 4, 1.0, 2.0)
    with pytest.raises(ValueError):
        CameraPose([0, 0, 0], np.eye(3), 10.0, 4, 4, 2.0, 1.0)
    with pytest.raises(ValueError):
        CameraPose([0, 0, 0], np.eye(3), 10.0, 0, 4, 1.0, 2.0)
    pose = CameraPose([0, 0, 0], np.eye(3), 10.0, 4, 3, 1.0, 2.0)
    with pytest.raises(ValueError):
        PosedImage(pose, np.zeros((4, 3, 3)))


def test_single_view_looks_at_center():
    center = np.array([0.5, -0.2, 0.1])
    (pose,) = sample_sphere_views(1, 2.5, center=center, seed=4)
    np.testing.assert_allclose(np.linalg.norm(pose.position - center), 2.5, atol=1e-12)
    to_center = (center - pose.position) / 2.5
    np.testing.assert_allclose(pose.forward, to_center, atol=1e-6)


def test_sphere_views_deterministic_and_on_sphere():
    a = sample_sphere_views(100, 3.0, seed=7)
    b = sample_sphere_views(100, 3.0, seed=7)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.position, q.position)
        np.testing.assert_array_equal(p.rotation, q.rotation)
    pos = np.stack([p.position for p in a])
    np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 3.0, atol=1e-9)
    unit = pos / 3.0
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(cos, -1.0)
    assert np.arccos(cos.max()) > 0.0
    for p in a:
        np.testing.assert_allclose(p.forward, -unit[a.index(p)], atol=1e-6)


def test_seed_rotates_lattice_and_hemisphere_is_upper():
    a = sample_sphere_views(20, 3.0, seed=0)
    b = sample_sphere_views(20, 3.0, seed=1)
    assert not np.allclose(a[3].position, b[3].position)
    h = sample_sphere_views(50, 3.0, hemisphere=True, seed=2)
    assert all(p.position[2] > 0 for p in h)


def test_oracle_empty_scene_is_background():
    scene = Scene([], [0.1, 0.5, 0.9], 1.0)
    pose = look_at([3, 0, 0], [0, 0, 0], focal_length=8, width=6, height=5, t_near=1, t_far=5)
    img = oracle_render(scene, pose, 64)
    assert img.pixels.shape == (5, 6, 3)
    np.testing.assert_allclose(img.pixels, np.broadcast_to([0.1, 0.5, 0.9], (5, 6, 3)), atol=1e-15)


def test_oracle_opaque_sphere_fills_frustum():
    scene = Scene([Primitive("sphere", [0, 0, 0], 1.0, 1e4, [0, 1, 0])], [0, 0, 0], 1.0)
    pose = look_at([2.5, 0, 0], [0, 0, 0], focal_length=40, width=6, height=6, t_near=1, t_far=4)
    img = oracle_render(scene, pose, 256)
    np.testing.assert_allclose(img.pixels, np.broadcast_to([0, 1, 0], img.pixels.shape), atol=1e-3)


def _half_covered():
    # a slab covering the left half of the frustum; density small enough to be resolvable
    scene = Scene([Primitive("box", [0.0, -1.0, 0.0], [0.4, 1.0, 2.5], 8.0, [1.0, 0.5, 0.0])], [0, 0, 1], 4.0)
    pose = look_at([3, 0, 0], [0, 0, 0], focal_length=6, width=8, height=8, t_near=1.5, t_far=4.5)
    return scene, pose


def test_oracle_half_covered_frustum_converges():
    scene, pose = _half_covered()
    ref = oracle_render(scene, pose, 64 * 16).pixels
    # pixel x grows along +y here, so the slab at -y covers the left half
    assert np.all(ref[:, :3, 0] > 0.9)
    np.testing.assert_allclose(ref[:, 5:], np.broadcast_to([0, 0, 1], ref[:, 5:].shape), atol=1e-12)
    coarse = oracle_render(scene, pose, 64 * 4).pixels
    fine = oracle_render(scene, pose, 64 * 8).pixels
    assert np.max(np.abs(fine - coarse)) < 1e-3


def test_oracle_convergence_is_monotone():
    scene, pose = _half_covered()
    imgs = [oracle_render(scene, pose, 64 * 2 ** k).pixels for k in range(5)]
    diffs = [np.max(np.abs(imgs[k + 1] - imgs[k])) for k in range(4)]
    for prev, nxt in zip(diffs, diffs[1:]):
        assert nxt < 2.0 * prev


def test_oracle_range_and_transmittance():
    scene = default_scene()
    pose = sample_sphere_views(1, 3.5, seed=0, width=8, height=8)[0]
    img = oracle_render(scene, pose, 128)
    assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
    # transmittance along a ray through the scene never increases
    d = pose.pixel_directions(np.array([4]), np.array([4]))[0]
    t = np.linspace(pose.t_near, pose.t_far, 400)
    sigma, _ = query_scene(scene, pose.position + t[:, None] * d)
    trans = np.exp(-np.cumsum(sigma * (t[1] - t[0])))
    assert np.all(np.diff(trans) <= 0)


def test_oracle_requires_enough_steps(sphere_scene):
    pose = look_at([3, 0, 0], [0, 0, 0], focal_length=8, width=2, height=2, t_near=1, t_far=5)
    with pytest.raises(ValueError):
        oracle_render(sphere_scene, pose, 32)


def test_generate_dataset_order_and_determinism(sphere_scene):
    assert generate_dataset(sphere_scene, []) == []
    poses = sample_sphere_views(3, 3.0, seed=0, width=5, height=4, t_near=1.5, t_far=4.5)
    imgs = generate_dataset(sphere_scene, [poses[0], poses[1], poses[2], poses[0]], 64)
    assert len(imgs) == 4
    assert [im.pose for im in imgs[:3]] == poses
    np.testing.assert_array_equal(imgs[0].pixels, imgs[3].pixels)
