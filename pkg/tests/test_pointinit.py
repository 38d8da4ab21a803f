import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatstream.core import Camera
from splatstream.io import read_pgm, read_ply, write_pgm, write_ply
from splatstream.pointinit import (UNKNOWN_LABEL, SemanticPointCloud, bev_augment, bev_cells, in_any_frustum,
                                   init_gaussians, label_points, label_points_multi, load_label_map, merge,
                                   resolve_labels, voxel_downsample)

# camera looking along +y: camera x = world x, camera y = -world z
LOOK_Y = np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]])


def look_y_camera(center, w=100, h=100, f=50.0):
    return Camera(f, f, w / 2, h / 2, w, h, LOOK_Y, -LOOK_Y @ np.asarray(center, dtype=float))


def test_voxel_examples():
    out = voxel_downsample([[0.02, 0.02, 0.02], [0.03, 0.02, 0.02]], 0.15)
    assert np.allclose(out, [[0.025, 0.02, 0.02]])
    assert len(voxel_downsample([[0, 0, 0], [10, 0, 0]], 0.15)) == 2
    assert voxel_downsample(np.zeros((0, 3))).shape == (0, 3)
    with pytest.raises(ValueError):
        voxel_downsample([[0, 0, 0]], 0.0)


def voxel_oracle(points, grid):
    cells = {}
    for p in points:
        key = tuple(int(np.floor(c / grid)) for c in p)
        cells.setdefault(key, []).append(p)
    return {k: np.mean(v, axis=0) for k, v in cells.items()}


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 2.0))
def test_voxel_matches_hash_oracle(seed, grid):
    pts = np.random.default_rng(seed).uniform(-3, 3, (300, 3))
    out = voxel_downsample(pts, grid)
    oracle = voxel_oracle(pts, grid)
    assert len(out) == len(oracle)
    keys = [tuple(k) for k in np.floor(out / grid).astype(int)]
    assert len(set(keys)) == len(keys)  # at most one point per voxel
    for k, p in zip(keys, out):
        assert np.allclose(p, oracle[k], atol=1e-12)


def test_label_examples():
    cam = Camera(100, 100, 50, 50, 100, 100)
    sem = np.zeros((100, 100), dtype=np.uint16)
    sem[50, 50] = 7
    cloud = label_points([[0, 0, 1], [0, 0, -1], [5, 0, 1]], sem, cam, {0: "road", 7: "building"})
    assert cloud.labels.tolist() == [7, UNKNOWN_LABEL, UNKNOWN_LABEL]
    with pytest.raises(ValueError):
        label_points([[0, 0, 1]], np.zeros((10, 10)), cam)


def test_labels_match_scalar_oracle():
    cam = Camera(40, 40, 16, 12, 32, 24)
    sem = np.where(np.arange(32)[None, :] < 16, 1, 2).repeat(24, axis=0)
    xs, ys = np.meshgrid(np.linspace(-0.6, 0.6, 23), np.linspace(-0.5, 0.5, 17))
    pts = np.column_stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    got = label_points(pts, sem, cam).labels
    for p, lab in zip(pts, got):
        u = int(np.floor(40 * p[0] / p[2] + 16 + 0.5))
        v = int(np.floor(40 * p[1] / p[2] + 12 + 0.5))
        expect = sem[v, u] if 0 <= u < 32 and 0 <= v < 24 else UNKNOWN_LABEL
        assert lab == expect
    assert {1, 2, UNKNOWN_LABEL} <= set(got.tolist())


def test_multi_camera_first_hit_wins():
    a = Camera(100, 100, 50, 50, 100, 100)
    b = Camera(100, 100, 50, 50, 100, 100, translation=[-10, 0, 0])  # sees x near 10
    pts = [[0, 0, 1], [10, 0, 1]]
    cloud = label_points_multi(pts, [np.full((100, 100), 3), np.full((100, 100), 4)], [a, b])
    assert cloud.labels.tolist() == [3, 4]


def test_cloud_validation():
    with pytest.raises(ValueError):
        SemanticPointCloud(np.zeros((2, 3)), [1])
    with pytest.raises(ValueError):
        SemanticPointCloud(np.zeros((1, 3)), [9], {1: "x"})


def test_bev_example():
    cloud = SemanticPointCloud([[3.0, 4.0, 1.0]], [1], {1: "building"})
    cam = look_y_camera([3.5, -10.0, 2.0])
    out = bev_augment(cloud, {1}, 1.0, 1.0, 3.0, [cam])
    assert np.allclose(out, [[3.5, 4.5, 1], [3.5, 4.5, 2], [3.5, 4.5, 3]])


def test_bev_empty_cases():
    cloud = SemanticPointCloud([[3.0, 4.0, 1.0]], [2], {1: "building", 2: "road"})
    cam = look_y_camera([3.5, -10.0, 2.0])
    assert len(bev_augment(cloud, {1}, 1.0, 1.0, 3.0, [cam])) == 0
    cloud = SemanticPointCloud([[3.0, 4.0, 1.0]], [1], {1: "building"})
    behind = look_y_camera([3.5, 20.0, 2.0])
    assert len(bev_augment(cloud, {1}, 1.0, 1.0, 3.0, [behind])) == 0
    assert len(bev_augment(cloud, {1}, 1.0, 1.0, 3.0, [])) == 0


@pytest.mark.parametrize("kw", [{"dz": 0.0}, {"dz": 2.0, "h": 1.0}, {"bev_grid": 0.0}])
def test_bev_rejects_bad_parameters(kw):
    args = {"bev_grid": 1.0, "dz": 1.0, "h": 3.0} | kw
    with pytest.raises(ValueError):
        bev_augment(SemanticPointCloud([[0, 0, 0]], [1]), {1}, args["bev_grid"], args["dz"], args["h"], [])


def _street(rng):
    pts = np.column_stack([rng.uniform(0, 30, 400), rng.uniform(8, 12, 400), rng.uniform(0, 6, 400)])
    labels = rng.integers(0, 3, 400)
    cams = [look_y_camera([x, -5.0, 2.0], 64, 48, 32.0) for x in (5.0, 15.0, 25.0)]
    return SemanticPointCloud(pts, labels, {0: "road", 1: "building", 2: "pole"}), cams


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 1.0, 2.0]), st.sampled_from([0.25, 0.5, 1.0]),
       st.floats(1.0, 15.0))
def test_bev_invariants(seed, grid, dz, h):
    cloud, cams = _street(np.random.default_rng(seed))
    out = bev_augment(cloud, {1, 2}, grid, dz, h, cams)
    k = out[:, 2] / dz
    assert np.allclose(k, np.round(k), atol=1e-9) and np.all(np.round(k) >= 1)
    assert np.all(out[:, 2] <= h + 1e-9)
    assert np.all(in_any_frustum(out, cams))
    merged = merge(cloud.points, out)
    assert len(merged) == len(cloud.points) + len(out)
    assert np.array_equal(merged[:len(cloud.points)], cloud.points)
    # idempotent at the BEV level, whether augmented points are unlabeled or carry a target label
    for lab in (UNKNOWN_LABEL, 1):
        again = SemanticPointCloud(merged, np.r_[cloud.labels, np.full(len(out), lab)])
        assert np.array_equal(bev_augment(again, {1, 2}, grid, dz, h, cams), out)
        sel = np.isin(again.labels, [1, 2])
        assert np.array_equal(bev_cells(again.points[sel], grid),
                              bev_cells(cloud.points[np.isin(cloud.labels, [1, 2])], grid))


def test_merge_counts():
    a, b = np.ones((4, 3)), np.zeros((2, 3))
    assert len(merge(a, np.zeros((0, 3)))) == 4
    assert len(merge(np.zeros((0, 3)), b)) == 2
    assert np.array_equal(merge(a, b), np.r_[a, b])


def test_init_gaussians_nearest_neighbor_scale():
    g = init_gaussians([[0, 0, 0], [0.5, 0, 0], [3, 0, 0]])
    assert np.allclose(np.exp(g.log_scales[:, 0]), [0.5, 0.5, 2.5])
    assert np.allclose(g.opacities, 0.1) and np.allclose(g.quats, [1, 0, 0, 0])


def test_label_map_formats(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"1": "building", "2": "pole"}))
    (tmp_path / "b.json").write_text(json.dumps([{"id": 1, "name": "building"}]))
    m = load_label_map(tmp_path / "a.json")
    assert m == {1: "building", 2: "pole"} and load_label_map(tmp_path / "b.json") == {1: "building"}
    assert resolve_labels(["building", "2"], m) == {1, 2}
    with pytest.raises(KeyError):
        resolve_labels(["tree"], m)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip(tmp_path, binary):
    rng = np.random.default_rng(3)
    pts = rng.normal(0, 10, (50, 3))
    labels = rng.integers(0, 65536, 50)
    write_ply(tmp_path / "c.ply", pts, labels, binary=binary)
    back, lab = read_ply(tmp_path / "c.ply")
    assert np.array_equal(back, pts.astype(np.float32).astype(np.float64))
    assert np.array_equal(lab, labels)
    write_ply(tmp_path / "d.ply", pts, binary=binary)
    assert read_ply(tmp_path / "d.ply")[1] is None


def test_ply_truncated(tmp_path):
    write_ply(tmp_path / "c.ply", np.ones((5, 3)))
    data = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "c.ply").write_bytes(data[:-3])
    with pytest.raises(ValueError):
        read_ply(tmp_path / "c.ply")


def test_pgm_16bit_roundtrip(tmp_path):
    sem = np.random.default_rng(4).integers(0, 65536, (7, 9))
    write_pgm(tmp_path / "s.pgm", sem)
    assert np.array_equal(read_pgm(tmp_path / "s.pgm"), sem)
