import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import circle, example1_curve, sphere
from evokansa import surfaces
from evokansa.checks import fibonacci_sphere
from evokansa.surfaces import (AmbientField, ParametricSurface, PointCloudFrame, PoleError,
                               SnapshotFormatError, SurfaceError)


def test_velocity_examples():
    c = circle("exp(t/5)")
    np.testing.assert_allclose(surfaces.velocity(c, [[0.0]], 0.0), [[0.2, 0.0]], atol=1e-15)
    np.testing.assert_array_equal(surfaces.velocity(circle(), [[0.3]], 1.0), 0.0)
    s = sphere("exp(t/5)")
    phi = np.array([[0.4, 1.0], [2.0, 5.0]])
    np.testing.assert_allclose(surfaces.velocity(s, phi, 0.7), s.points(phi, 0.7) / 5, rtol=1e-14)


def test_analytic_normals():
    np.testing.assert_allclose(surfaces.analytic_normal(circle(), [[math.pi / 2]], 0), [[0, 1]], atol=1e-15)
    np.testing.assert_allclose(surfaces.analytic_normal(example1_curve(), [[0.0]], 0), [[1, 0]], atol=1e-15)
    n = surfaces.analytic_normal(sphere(), [[1e-6, 0.3]], 0)
    np.testing.assert_allclose(n, [[0, 0, 1]], atol=1e-5)
    with pytest.raises(PoleError):
        sphere().geometry([[0.0, 0.3]], 0).normals()


@given(st.floats(0.05, math.pi - 0.05), st.floats(0, 2 * math.pi), st.floats(0, 3))
def test_normals_unit_and_orthogonal(th, ph, t):
    g = sphere("1 + 0.3*sin(t)").geometry([[th, ph]], t)
    n = g.normals()
    assert abs(np.linalg.norm(n) - 1) < 1e-12
    assert np.max(np.abs(np.einsum("nd,ndq->nq", n, g.jac))) < 1e-10
    # outward
    assert float(np.sum(n * g.points)) > 0


@pytest.mark.parametrize("R", [0.5, 1.0, 2.0])
def test_mean_curvature_spheres(R):
    phi = np.array([[0.3, 0.1], [1.2, 4.0], [2.9, 2.0]])
    np.testing.assert_allclose(surfaces.mean_curvature_sum(sphere(str(R)), phi, 0), 2 / R, rtol=1e-8)
    np.testing.assert_allclose(surfaces.mean_curvature_sum(circle(str(R)), [[0.2], [3.0]], 0), 1 / R,
                               rtol=1e-8)


def test_generate_nodes_circle():
    cs = surfaces.generate_nodes(circle(), target_n=4)
    np.testing.assert_allclose(cs.phi_Z[:, 0], [0, math.pi / 2, math.pi, 3 * math.pi / 2])
    np.testing.assert_allclose(cs.Z, [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-15)
    assert cs.x_is_z and cs.X is cs.Z


def test_generate_nodes_ladder_counts():
    for nz, nx in [(5, 7), (9, 14), (18, 27), (26, 54)]:
        cs = surfaces.generate_nodes(example1_curve(), target_n=nz, n_x=nx, with_fill=False)
        assert (cs.n_Z, cs.n_X) == (nz, nx)


def test_generate_nodes_oversampled_sphere():
    cs = surfaces.generate_nodes(sphere(), target_h=0.5, oversample_ratio=1.5)
    assert cs.counts_Z == (6, 13) and cs.n_X > cs.n_Z
    assert 1.3 < cs.n_X / cs.n_Z < 1.7
    assert cs.h_X < cs.h_Z
    # half-cell offset keeps nodes off the poles
    assert np.all(np.abs(cs.Z[:, 2]) < 1)


def test_generate_nodes_errors():
    with pytest.raises(SurfaceError):
        surfaces.generate_nodes(sphere(), target_n=2)
    with pytest.raises(SurfaceError):
        surfaces.generate_nodes(circle(), target_n=10, oversample_ratio=0.5)


def test_fill_distance_circle():
    c = circle()
    probe = surfaces.dense_probe(c, 0, 4)
    P4 = surfaces.generate_nodes(c, target_n=4, with_fill=False).Z
    assert surfaces.fill_distance(P4, probe) == pytest.approx(2 * math.sin(math.pi / 8), rel=1e-3)
    assert surfaces.fill_distance(P4[:1], probe) == pytest.approx(2.0, rel=1e-4)
    with pytest.raises(SurfaceError):
        surfaces.fill_distance(P4, P4)
    with pytest.raises(SurfaceError):
        surfaces.fill_distance(np.empty((0, 2)), probe)


def test_fill_distance_143_points_example1():
    # covering radius is half the node spacing the ladder calls h
    cs = surfaces.generate_nodes(example1_curve(), target_n=143)
    h_ladder = 2.0**-5 * math.sqrt(2)
    assert cs.h_Z == pytest.approx(h_ladder / 2, rel=0.2)


def test_estimate_normal_circle():
    P = surfaces.generate_nodes(circle(), target_n=200, with_fill=False).Z
    n = surfaces.estimate_normal(P, [1.0, 0.0], k=10)
    assert math.degrees(math.acos(min(1.0, n[0]))) < 1.0


def _angle_max(P, n):
    return float(np.degrees(np.max(np.arccos(np.clip(np.sum(P * n, axis=1), -1, 1)))))


def test_estimated_normals_sphere_and_refinement():
    errs = []
    for n in (250, 500, 1000):
        P = fibonacci_sphere(n)
        errs.append(_angle_max(P, surfaces.estimate_normals(P)))
    assert errs[-1] <= 1.0
    assert errs[0] > errs[1] > errs[2]


def test_estimated_normals_rotation_equivariant(rng):
    P = fibonacci_sphere(300) * np.array([1.0, 0.8, 1.3])
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    n1 = surfaces.estimate_normals(P)
    n2 = surfaces.estimate_normals(P @ Q.T)
    np.testing.assert_allclose(n2, n1 @ Q.T, atol=1e-10)


def test_cloud_needs_enough_points():
    with pytest.raises(SurfaceError):
        PointCloudFrame(0.0, [[0, 0, 0], [1, 0, 0]])


def test_advect_examples():
    v = AmbientField.from_strings(["x1/5", "x2/5", "x3/5"], 3)
    np.testing.assert_allclose(surfaces.advect([[1.0, 0, 0]], v, 0.0, 0.02), [[1.004, 0, 0]], rtol=1e-15)
    zero = AmbientField.from_strings(["0", "0", "0"], 3)
    P = fibonacci_sphere(50)
    np.testing.assert_array_equal(surfaces.advect(P, zero, 0.0, 0.1), P)
    X = P.copy()
    for m in range(50):
        X = surfaces.advect(X, v, 0.02 * m, 0.02)
        r = np.linalg.norm(X, axis=1)
        assert np.ptp(r) <= 1e-12 * 50
    assert np.max(np.abs(np.linalg.norm(X, axis=1) - math.exp(0.2))) <= 2e-3
    with pytest.raises(SurfaceError):
        surfaces.advect(P, v, 0.0, 0.0)


def test_decompose_velocity():
    n = np.array([[0.0, 0.0, 1.0]])
    vn, vt = surfaces.decompose_velocity([[0.0, 0.0, 2.0]], n)
    np.testing.assert_array_equal(vt, 0.0)
    vn, vt = surfaces.decompose_velocity([[1.0, 1.0, 0.0]], n)
    np.testing.assert_array_equal(vn, 0.0)
    np.testing.assert_array_equal(vt, [[1.0, 1.0, 0.0]])


def test_grid_triangles_cover_sphere():
    s = sphere()
    counts = (20, 40)
    tris = surfaces.grid_triangles(counts, s.periodic)
    P = s.points(surfaces.parameter_grid(s, counts), 0)
    v = P[tris]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum()
    assert area == pytest.approx(4 * math.pi, rel=0.02)
    segs = surfaces.grid_triangles((10,), (True,))
    assert segs.shape == (10, 2) and segs[-1].tolist() == [9, 0]


def test_snapshot_round_trip(tmp_path):
    P = fibonacci_sphere(10)
    fr = PointCloudFrame(0.25, P, triangles=np.array([[0, 1, 2], [2, 3, 4]]))
    u = np.linspace(0, 1, 10) / 3
    surfaces.write_snapshot(tmp_path / "a.txt", fr, u)
    back = surfaces.read_snapshot(tmp_path / "a.txt")
    np.testing.assert_array_equal(back.points, P)
    np.testing.assert_array_equal(back.values, u)
    np.testing.assert_array_equal(back.triangles, fr.triangles)
    assert back.t == 0.25


def test_load_sequence(tmp_path):
    P = fibonacci_sphere(12)
    d = tmp_path / "seq"
    d.mkdir()
    surfaces.write_snapshot(d / "f0.txt", PointCloudFrame(0.0, P))
    surfaces.write_snapshot(d / "f1.txt", PointCloudFrame(0.001, P * 1.001))
    frames = surfaces.load_pointcloud_sequence(d)
    assert len(frames) == 2 and frames[1].t == 0.001
    with pytest.raises(SnapshotFormatError):
        surfaces.load_pointcloud_sequence([d / "f1.txt", d / "f0.txt"])
    bad = tmp_path / "bad.txt"
    bad.write_text("# t=0 d=3 K=2\n0 0 0\n1 0 0\n")
    with pytest.raises(SurfaceError):
        surfaces.read_snapshot(bad)
    bad.write_text("t=0 d=3\n")
    with pytest.raises(SnapshotFormatError):
        surfaces.read_snapshot(bad)
    surfaces.write_snapshot(tmp_path / "two.txt", PointCloudFrame(0.0, P[:, :2] + 0.0))
    with pytest.raises(SnapshotFormatError):
        surfaces.load_pointcloud_sequence([d / "f0.txt", tmp_path / "two.txt"])


def test_parametric_surface_validation():
    with pytest.raises(SurfaceError):
        ParametricSurface.from_strings(["cos(p)", "sin(p)"], ["p", "q"], [(0, 1), (0, 1)], [True, True])
    with pytest.raises(SurfaceError):
        ParametricSurface.from_strings(["cos(p)", "sin(p)"], ["p"], [(1, 0)], [True])
