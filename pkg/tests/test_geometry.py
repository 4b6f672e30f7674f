import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oscar.field import init_params
from oscar.geometry import (OccupancyGrid, TriangleMesh, chamfer, f1_score, grid_coords, grid_points, hd95,
                            marching_cubes, mesh_metrics, nearest_distances, query_occupancy_grid, read_ply,
                            sample_mesh_surface, write_obj, write_ply)


# brute-force oracles, O(n^2)
def bf_dists(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)


def bf_hd95(a, b):
    return max(np.percentile(bf_dists(a, b), 95), np.percentile(bf_dists(b, a), 95))


def bf_chamfer(a, b):
    return np.mean(bf_dists(a, b) ** 2) + np.mean(bf_dists(b, a) ** 2)


def bf_f1(a, b, tau):
    p, r = np.mean(bf_dists(a, b) <= tau), np.mean(bf_dists(b, a) <= tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def sphere_grid(n, r=0.5, c=(0.0, 0.0, 0.0)):
    pts = grid_points(n)
    return OccupancyGrid(n, (np.linalg.norm(pts - np.asarray(c), axis=1) <= r).astype(float))


def test_grid_layout_x_fastest():
    c = grid_coords(4)
    np.testing.assert_allclose(c, [-0.75, -0.25, 0.25, 0.75])
    pts = grid_points(4)
    np.testing.assert_allclose(pts[1], [-0.25, -0.75, -0.75])
    np.testing.assert_allclose(pts[4], [-0.75, -0.25, -0.75])
    g = OccupancyGrid(4, np.arange(64) / 63.0)
    assert g.volume_xyz()[1, 0, 0] == g.values[1]
    assert g.volume_xyz()[0, 1, 0] == g.values[4]


def test_grid_validation_and_lookup():
    with pytest.raises(ValueError):
        OccupancyGrid(3, np.zeros(26))
    with pytest.raises(ValueError):
        OccupancyGrid(2, np.full(8, 1.5))
    g = OccupancyGrid(4, np.arange(64) / 63.0)
    np.testing.assert_array_equal(g.lookup(g.points()), g.values)
    assert g.lookup(np.array([[5.0, 5.0, 5.0]]))[0] == 1.0
    np.testing.assert_array_equal(g.resample(8).resample(4).values, g.values)


def test_query_occupancy_grid_shape():
    p = init_params(latent_dim=4, hidden=8, layers=2, seed=0)
    g = query_occupancy_grid(p, np.zeros(4), 5)
    assert g.values.shape == (125,) and np.all((g.values > 0) & (g.values < 1))
    with pytest.raises(ValueError):
        query_occupancy_grid(p, np.zeros(4), 1)


def test_marching_cubes_sphere():
    mesh = marching_cubes(sphere_grid(32, 0.5))
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) < 2 * 2.0 / 32)
    assert mesh.euler_characteristic() == 2
    assert mesh.largest_component_fraction() == 1.0
    # staircase area of a binary sphere overshoots; a smooth occupancy recovers 4 pi r^2
    pts = grid_points(32)
    smooth = OccupancyGrid(32, 1 / (1 + np.exp((np.linalg.norm(pts, axis=1) - 0.5) / 0.05)))
    smesh = marching_cubes(smooth)
    assert smesh.areas().sum() == pytest.approx(4 * np.pi * 0.25, rel=0.02)
    assert np.all(np.abs(np.linalg.norm(smesh.vertices, axis=1) - 0.5) < 0.01)


def test_marching_cubes_empty_and_tie_rule():
    assert marching_cubes(OccupancyGrid(8, np.zeros(512))).is_empty
    assert marching_cubes(OccupancyGrid(8, np.ones(512))).is_empty
    assert marching_cubes(OccupancyGrid(8, np.full(512, 0.5))).is_empty


def test_components_two_spheres():
    n = 32
    pts = grid_points(n)
    v = ((np.linalg.norm(pts - [-0.5, 0, 0], axis=1) < 0.3)
         | (np.linalg.norm(pts - [0.5, 0, 0], axis=1) < 0.2)).astype(float)
    mesh = marching_cubes(OccupancyGrid(n, v))
    counts = mesh.component_face_counts()
    assert len(counts) == 2
    assert counts[0] > counts[1]
    assert 0.5 < mesh.largest_component_fraction() < 0.9


def test_surface_sampling_on_sphere():
    mesh = marching_cubes(sphere_grid(32, 0.5))
    s = sample_mesh_surface(mesh, 2000, seed=3)
    assert s.shape == (2000, 3)
    assert np.all(np.abs(np.linalg.norm(s, axis=1) - 0.5) < 0.07)
    np.testing.assert_array_equal(s, sample_mesh_surface(mesh, 2000, seed=3))
    with pytest.raises(ValueError):
        sample_mesh_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


@pytest.mark.parametrize("seed", range(3))
def test_metrics_match_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (200, 3)), rng.uniform(-1, 1, (200, 3))
    assert hd95(a, b) == bf_hd95(a, b)
    assert chamfer(a, b) == bf_chamfer(a, b)
    assert f1_score(a, b, 0.2) == bf_f1(a, b, 0.2)
    np.testing.assert_array_equal(nearest_distances(a, b), bf_dists(a, b))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), shift=st.floats(-5, 5))
def test_metrics_rigid_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (200, 3)), rng.uniform(-1, 1, (200, 3))
    rot = Rotation.random(random_state=seed % 1000).as_matrix()
    t = np.array([shift, -shift, 0.5 * shift])
    a2, b2 = a @ rot.T + t, b @ rot.T + t
    assert abs(hd95(a, b) - hd95(a2, b2)) < 1e-9
    assert abs(chamfer(a, b) - chamfer(a2, b2)) < 1e-9
    # f1 is a step function of distance, so compare the distances themselves
    np.testing.assert_allclose(nearest_distances(a, b), nearest_distances(a2, b2), atol=1e-9)


def test_metrics_identity_and_symmetry():
    a = np.random.default_rng(0).uniform(size=(100, 3))
    b = np.random.default_rng(1).uniform(size=(120, 3))
    assert hd95(a, a) == 0.0 and chamfer(a, a) == 0.0 and f1_score(a, a) == 1.0
    assert hd95(a, b) == hd95(b, a)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-15)
    with pytest.raises(ValueError):
        hd95(a, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        f1_score(a, b, tau=0.0)


def test_metric_known_offset():
    a = np.random.default_rng(0).uniform(size=(50, 3)) * np.array([1, 1, 0])
    b = a + np.array([0, 0, 0.3])
    assert hd95(a, b) == pytest.approx(0.3)
    assert chamfer(a, b) == pytest.approx(2 * 0.09)
    assert f1_score(a, b, 0.2) == 0.0


def test_mesh_metrics_sphere_scales():
    gt = marching_cubes(sphere_grid(40, 0.5))
    pred = marching_cubes(sphere_grid(40, 0.6))
    m = mesh_metrics(pred, gt, samples=3000, seed=0)
    assert 0.05 < m["hd95"] < 0.16
    assert mesh_metrics(gt, gt, samples=3000)["hd95"] < 0.05
    empty = mesh_metrics(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), gt)
    assert empty["hd95"] == float("inf") and empty["f1"] == 0.0


def test_ply_obj_roundtrip(tmp_path):
    mesh = marching_cubes(sphere_grid(16, 0.5))
    write_ply(mesh, tmp_path / "m.ply")
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=1e-8, atol=1e-9)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    write_obj(mesh, tmp_path / "m.obj")
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(ln.startswith("v ") for ln in lines) == len(mesh.vertices)
    faces = [ln for ln in lines if ln.startswith("f ")]
    assert len(faces) == len(mesh.triangles)
    assert min(int(v) for ln in faces for v in ln.split()[1:]) == 1


def test_read_ply_rejects_garbage(tmp_path):
    (tmp_path / "x.ply").write_text("solid\n")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "x.ply")


def test_hd95_ignores_few_outliers():
    g = np.linspace(0, 1, 10)
    a = np.stack(np.meshgrid(g, g, [0.0]), -1).reshape(-1, 3)
    b = np.concatenate([a, a[:4] + [0, 0, 1.0]])
    assert hd95(a, b) < 0.05
    assert hd95(a, a + [0.1, 0, 0]) == pytest.approx(0.1)


def test_chamfer_and_f1_analytic():
    assert chamfer(np.zeros((1, 3)), np.array([[0.3, 0, 0]])) == pytest.approx(2 * 0.09)
    gt = np.random.default_rng(0).uniform(size=(40, 3))
    pred = np.concatenate([gt, gt + 10.0])        # half the predictions far away, all gt covered
    assert f1_score(pred, gt, 0.01) == pytest.approx(2 * 0.5 / 1.5)
    assert f1_score(gt + 5.0, gt, 0.01) == 0.0


def test_sampling_unit_square_and_sphere_mean():
    sq = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]]), np.array([[0, 1, 2], [0, 2, 3]]))
    s = sample_mesh_surface(sq, 1000, seed=0)
    assert np.all((s[:, :2] >= 0) & (s[:, :2] <= 1)) and np.all(s[:, 2] == 0)
    sph = sample_mesh_surface(marching_cubes(sphere_grid(48, 0.5)), 10_000, seed=1)
    assert np.linalg.norm(sph.mean(axis=0)) < 0.02


def test_box_topology_and_complement():
    pts = grid_points(24)
    box = (np.abs(pts).max(axis=1) < 0.5).astype(float)
    mesh = marching_cubes(OccupancyGrid(24, box))
    assert mesh.euler_characteristic() == 2
    comp = marching_cubes(OccupancyGrid(24, 1.0 - box))
    a = np.sort(np.round(mesh.vertices, 9), axis=0)
    b = np.sort(np.round(comp.vertices, 9), axis=0)
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert len(mesh.triangles) == len(comp.triangles)


def test_zero_occupancy_head_and_tiny_grid():
    p = init_params(latent_dim=4, hidden=8, layers=2, seed=0)
    p.occupancy_w[...] = 0.0
    g = query_occupancy_grid(p, np.ones(4), 6)
    np.testing.assert_array_equal(g.values, 0.5)
    g2 = query_occupancy_grid(init_params(latent_dim=4, hidden=8, layers=2), np.zeros(4), 2)
    assert g2.values.shape == (8,)
    np.testing.assert_allclose(np.abs(g2.points()), 0.5)
