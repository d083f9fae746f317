import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapfuse.geometry import Intrinsics, Pose, pose_inverse
from mapfuse.projection import (
    InvalidDepthError,
    MapFormatError,
    PointCloudMap,
    backproject_pixel,
    load_depth_png,
    load_map,
    project_point,
    render_depth,
    render_overlay,
    save_depth_png,
    save_map,
    voxel_downsample,
)

K = Intrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)


def brute_force_depth(points, pose, k, near=0.5, far=100.0):
    """Per-point loop over ``project_point`` keeping the per-pixel minimum."""
    img = np.zeros((k.height, k.width), dtype=np.float32)
    for p in points:
        hit = project_point(p, pose, k, near, far)
        if hit is None:
            continue
        u, v, z = hit
        z = np.float32(z)
        if img[v, u] == 0 or z < img[v, u]:
            img[v, u] = z
    return img


def test_project_point_examples():
    assert project_point([0, 0, 5], Pose.identity(), K) == (320, 240, 5.0)
    assert project_point([0, 0, -1], Pose.identity(), K) is None
    u, v, z = project_point([1, 0, 2], Pose.identity(), K)
    assert u == math.floor(100 * 0.5 + 320) == 370


def test_project_point_clips():
    assert project_point([0, 0, 0.4], Pose.identity(), K) is None
    assert project_point([0, 0, 101], Pose.identity(), K) is None
    assert project_point([100, 0, 1], Pose.identity(), K) is None


def test_render_two_points_same_pixel_keeps_nearest():
    cloud = PointCloudMap([[0, 0, 9.0], [0, 0, 4.0]])
    depth = render_depth(cloud, Pose.identity(), K)
    assert depth[240, 320] == 4.0
    assert np.count_nonzero(depth) == 1


def test_render_empty_frustum():
    cloud = PointCloudMap(np.random.default_rng(0).uniform(-5, 5, (100, 3)) - [0, 0, 10])
    assert not render_depth(cloud, Pose.identity(), K).any()


def test_single_point_exact_depth():
    pose = Pose([0.3, -0.2, 0.1], [0.99, 0.02, 0.05, -0.03])
    x = np.array([0.5, 0.2, 7.0])
    depth = render_depth(PointCloudMap([x]), pose, K)
    assert np.count_nonzero(depth) == 1
    from mapfuse.geometry import pose_apply

    assert abs(depth[depth > 0][0] - pose_apply(pose, x)[2]) < 1e-6


def test_tie_break_lowest_index():
    cloud = PointCloudMap([[0, 0, 5.0], [0.001, 0, 5.0], [0, 0, 5.0]])
    depth, winner = render_depth(cloud, Pose.identity(), K, return_index=True)
    assert winner[240, 320] == 0
    assert depth[240, 320] == 5.0


def test_render_matches_brute_force_on_random_scenes():
    rng = np.random.default_rng(42)
    for trial in range(20):
        n = int(rng.integers(1, 3000))
        pts = rng.uniform([-20, -15, -5], [20, 15, 60], (n, 3))
        # duplicate some points to force z-buffer collisions
        pts = np.concatenate([pts, pts[: n // 4] * [1, 1, 1.5]])
        pose = Pose(rng.uniform(-1, 1, 3), [1, *rng.normal(scale=0.05, size=3)])
        got = render_depth(PointCloudMap(pts), pose, K)
        assert np.array_equal(got, brute_force_depth(pts, pose, K)), trial


def test_backproject_examples():
    p = backproject_pixel(320, 240, 5.0, Pose.identity(), K)
    np.testing.assert_allclose(p, [0, 0, 5.0], atol=5.0 / K.fx)
    with pytest.raises(InvalidDepthError):
        backproject_pixel(10, 10, 0.0, Pose.identity(), K)


def test_backproject_roundtrip():
    rng = np.random.default_rng(7)
    pose = Pose([1, 2, 0.5], [0.95, 0.1, -0.1, 0.2])
    done = 0
    while done < 1000:
        x_cam = np.array([rng.uniform(-10, 10), rng.uniform(-8, 8), rng.uniform(1, 50)])
        x = pose.rotation @ x_cam + pose.t
        hit = project_point(x, pose, K)
        if hit is None:
            continue
        u, v, z = hit
        back = backproject_pixel(u, v, z, pose, K)
        # within half a pixel of lateral quantization at depth z (per image axis)
        d_cam = pose.rotation.T @ (back - x)
        assert abs(d_cam[2]) < 1e-9
        assert abs(d_cam[0]) <= 0.5 * z / K.fx + 1e-9
        assert abs(d_cam[1]) <= 0.5 * z / K.fy + 1e-9
        assert project_point(back, pose, K)[:2] == (u, v)
        done += 1


def voxel_oracle(points, voxel):
    return len({tuple(int(c) for c in np.floor(p / voxel)) for p in points})


def test_voxel_downsample_examples():
    one = voxel_downsample(PointCloudMap([[0.1, 0.1, 0.1], [0.2, 0.3, 0.4], [0.9, 0.9, 0.9]]), 1.0)
    assert len(one) == 1
    np.testing.assert_allclose(one.points[0], [0.4, 13 / 30, 14 / 30])
    grid = np.stack(np.meshgrid(np.arange(5), np.arange(4), np.arange(3)), -1).reshape(-1, 3) * 2.0 + 0.5
    assert len(voxel_downsample(PointCloudMap(grid), 2.0)) == len(grid)
    rng = np.random.default_rng(3)
    pts = rng.normal(scale=4, size=(5000, 3))
    assert len(voxel_downsample(PointCloudMap(pts), 0.7)) == voxel_oracle(pts, 0.7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 3.0))
def test_voxel_idempotent(seed, voxel):
    pts = np.random.default_rng(seed).uniform(-10, 10, (500, 3))
    once = voxel_downsample(PointCloudMap(pts), voxel)
    twice = voxel_downsample(once, voxel)
    assert len(once) <= 500
    assert np.array_equal(once.points, twice.points)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_points_never_worsens_depth(seed):
    rng = np.random.default_rng(seed)
    base = rng.uniform([-10, -8, 0], [10, 8, 40], (400, 3))
    extra = rng.uniform([-10, -8, 0], [10, 8, 40], (400, 3))
    d0 = render_depth(PointCloudMap(base), Pose.identity(), K)
    d1 = render_depth(PointCloudMap(np.concatenate([base, extra])), Pose.identity(), K)
    assert np.all(d1[d0 > 0] > 0)
    assert np.all(d1[d0 > 0] <= d0[d0 > 0])


def test_pose_consistency():
    rng = np.random.default_rng(9)
    pts = rng.uniform([-10, -8, -5], [10, 8, 40], (3000, 3))
    pose = Pose([0.4, -0.3, -2.0], [0.98, 0.05, 0.1, -0.02])
    cloud = PointCloudMap(pts)
    a = render_depth(cloud, pose, K)
    b = render_depth(cloud.transformed(pose), Pose.identity(), K)
    # pixel assignment can flip for points sitting exactly on a pixel border
    same = (a > 0) == (b > 0)
    assert same.mean() > 0.999
    both = (a > 0) & (b > 0)
    assert np.max(np.abs(a[both] - b[both])) <= 1e-6 * np.max(a)
    assert np.count_nonzero(np.abs(a[both] - b[both]) > 1e-5) == 0


def test_overlay_examples():
    img = np.full((480, 640, 3), 30, np.uint8)
    assert np.array_equal(render_overlay(img, None, Pose.identity(), K), img)
    out = render_overlay(img, PointCloudMap([[0, 0, 5.0]]), Pose.identity(), K)
    changed = np.argwhere(np.any(out != img, axis=-1))
    assert changed.tolist() == [[240, 320]]


def test_overlay_pixels_match_depth_support():
    rng = np.random.default_rng(11)
    cloud = PointCloudMap(rng.uniform([-10, -8, 1], [10, 8, 40], (2000, 3)))
    img = np.zeros((480, 640, 3), np.uint8)
    out = render_overlay(img, cloud, Pose.identity(), K)
    depth = render_depth(cloud, Pose.identity(), K)
    # the colormap never returns pure black, so painted == changed
    assert np.array_equal(np.any(out != img, axis=-1), depth > 0)
    assert np.array_equal(out, render_overlay(img, cloud, Pose.identity(), K))


def test_map_blob_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-5, 5, (100, 3)).astype(np.float32)
    cols = rng.integers(0, 256, (100, 3)).astype(np.uint8)
    for colors in (None, cols):
        path = tmp_path / "m.pcm"
        save_map(path, PointCloudMap(pts, colors))
        raw = path.read_bytes()
        assert raw[:4] == b"PCM1"
        assert int.from_bytes(raw[4:12], "little") == 100
        assert raw[12] == (0 if colors is None else 1)
        back = load_map(path)
        assert np.array_equal(back.points, pts.astype(np.float64))
        if colors is None:
            assert back.colors is None
        else:
            assert np.array_equal(back.colors, cols)


def test_map_blob_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pcm"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(MapFormatError):
        load_map(path)
    path.write_bytes(b"PCM1" + (5).to_bytes(8, "little") + b"\x00" + bytes(10))
    with pytest.raises(MapFormatError):
        load_map(path)


def test_depth_png_millimeters(tmp_path):
    depth = np.zeros((4, 5), np.float32)
    depth[1, 2] = 12.3456
    depth[3, 4] = 0.5
    save_depth_png(tmp_path / "d.png", depth)
    back = load_depth_png(tmp_path / "d.png")
    assert back[0, 0] == 0
    assert abs(back[1, 2] - 12.346) < 1e-6
    assert abs(back[3, 4] - 0.5) < 1e-6


def test_inverse_pose_render_equivalence_small():
    pose = Pose([0, 0, -3])
    cloud = PointCloudMap([[0, 0, 2.0]])
    a = render_depth(cloud, pose, K)
    b = render_depth(cloud.transformed(pose), Pose.identity(), K)
    assert a[240, 320] == b[240, 320] == 5.0
    assert pose_inverse(pose).t[2] == 3.0
