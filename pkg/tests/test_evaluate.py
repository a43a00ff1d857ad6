import json

import numpy as np
import pytest

from fmapkit.evaluate import (
    accuracy_curve,
    edge_graph,
    geodesic_from,
    mean_geodesic_error,
    pointwise_geodesic_errors,
    write_report,
)
from fmapkit.mesh import Mesh
from fmapkit.synthetic import icosphere


def floyd_warshall(mesh):
    n = mesh.n_vertices
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for i, j in mesh.edges():
        w = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j])
        d[i, j] = d[j, i] = min(d[i, j], w)
    for k in range(n):
        d = np.minimum(d, d[:, k, None] + d[None, k, :])
    return d


@pytest.fixture
def strip():
    """Four collinear-ish vertices 0-1-2-3 joined by thin triangles (unit edges)."""
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [0.5, 10, 0], [2.5, 10, 0]], dtype=float)
    f = np.array([[0, 1, 4], [1, 2, 4], [2, 5, 4], [2, 3, 5]])
    return Mesh(v, f)


def test_geodesic_to_self_is_zero(sphere2):
    assert geodesic_from(sphere2, 17).distances[17] == 0


def test_path_distances(strip):
    field = geodesic_from(strip, 0)
    np.testing.assert_allclose(field.distances[:4], [0, 1, 2, 3])
    assert field.normalization == pytest.approx(np.sqrt(strip.area))


def test_dijkstra_equals_floyd_warshall():
    mesh = icosphere(1)  # 42 vertices
    ref = floyd_warshall(mesh)
    for s in range(mesh.n_vertices):
        # path sums are associated differently by the two algorithms
        np.testing.assert_allclose(geodesic_from(mesh, s).distances, ref[s], rtol=1e-15)


def test_dijkstra_equals_floyd_warshall_bitwise_on_integer_lengths():
    # a zig-zag strip whose edges all have integer length, so every path sum is exact
    top = np.array([[3.0 * i, 4.0, 0.0] for i in range(8)])
    bottom = np.array([[3.0 * i, 0.0, 0.0] for i in range(8)])
    v = np.vstack([bottom, top])
    f = [[i, i + 1, 8 + i] for i in range(7)] + [[i + 1, 9 + i, 8 + i] for i in range(7)]
    mesh = Mesh(v, np.array(f))
    ref = floyd_warshall(mesh)
    for s in range(mesh.n_vertices):
        np.testing.assert_array_equal(geodesic_from(mesh, s).distances, ref[s])


def test_triangle_inequality(sphere2):
    rng = np.random.default_rng(0)
    for u, v, w in rng.integers(0, sphere2.n_vertices, size=(30, 3)):
        du, dw = geodesic_from(sphere2, u).distances, geodesic_from(sphere2, w).distances
        assert du[v] <= du[w] + dw[v] + 1e-12


def test_disconnected_vertices_flagged():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]], dtype=float)
    mesh = Mesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    field = geodesic_from(mesh, 0)
    np.testing.assert_array_equal(field.disconnected, [False] * 3 + [True] * 3)
    err = mean_geodesic_error(np.array([3, 1, 2]), np.array([0, 1, 2]), mesh)
    assert err == 0.0  # the unreachable pair is excluded


def test_exact_map_has_zero_error(sphere2):
    t = np.random.default_rng(0).integers(0, sphere2.n_vertices, size=50)
    assert mean_geodesic_error(t, t, sphere2) == 0


def test_single_wrong_vertex():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [1.5, 1e-3, 0]], dtype=float)
    f = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4]])
    mesh = Mesh(v, f)
    gt = np.arange(5)
    pred = gt.copy()
    pred[0] = 1
    errors = pointwise_geodesic_errors(pred, gt, mesh)
    np.testing.assert_allclose(errors[0], 1 / np.sqrt(mesh.area))
    assert mean_geodesic_error(pred, gt, mesh) == pytest.approx(1 / np.sqrt(mesh.area) / 5)


def test_mean_error_equals_brute_force():
    mesh = icosphere(1)
    ref = floyd_warshall(mesh)
    rng = np.random.default_rng(1)
    gt = rng.permutation(mesh.n_vertices)
    pred = np.argmax(ref[gt], axis=1)  # maximally far assignment
    expected = ref[gt, pred].mean() / np.sqrt(mesh.area)
    assert mean_geodesic_error(pred, gt, mesh) == pytest.approx(expected, rel=1e-12)


def test_error_invariant_under_rigid_motion(sphere2):
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = sphere2.with_vertices(sphere2.vertices @ q.T + 3.0)
    pred, gt = rng.integers(0, 162, size=100), rng.integers(0, 162, size=100)
    assert mean_geodesic_error(pred, gt, moved) == pytest.approx(mean_geodesic_error(pred, gt, sphere2), rel=1e-12)


def test_length_mismatch(sphere2):
    with pytest.raises(ValueError):
        mean_geodesic_error(np.zeros(3, int), np.zeros(4, int), sphere2)


def test_precomputed_graph_reused(sphere2):
    g = edge_graph(sphere2)
    t = np.arange(162)
    assert mean_geodesic_error(t[::-1], t, sphere2, graph=g) == mean_geodesic_error(t[::-1], t, sphere2)


# ---------------------------------------------------------------------------
# Curves and reports


def test_accuracy_curve_counts():
    np.testing.assert_allclose(accuracy_curve([0, 0.1, 0.2], [0.05, 0.15]), [1 / 3, 2 / 3])


def test_accuracy_curve_edges():
    assert accuracy_curve([0.3, 0.1], [10.0])[0] == 1.0
    assert accuracy_curve([0, 0, 0], [0.0])[0] == 1.0


def test_accuracy_curve_nondecreasing():
    errors = np.random.default_rng(0).exponential(size=200)
    curve = accuracy_curve(errors, np.linspace(0, 3, 40))
    assert np.all(np.diff(curve) >= 0)


def test_accuracy_curve_rejects_descending():
    with pytest.raises(ValueError):
        accuracy_curve([0.1], [0.2, 0.1])


def test_report_files(tmp_path):
    errors = np.array([0.0, 0.01, 0.02, np.inf])
    report = write_report(tmp_path / "r.json", errors, [0.0, 0.015, 0.05], curve_path=tmp_path / "c.txt")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc == report
    assert doc["pairs"] == 1 and doc["excluded"] == 1
    assert doc["mean_error"] == pytest.approx(0.01)
    assert doc["mean_error_x100"] == pytest.approx(1.0)
    assert doc["curve"] == [[0.0, pytest.approx(1 / 3)], [0.015, pytest.approx(2 / 3)], [0.05, 1.0]]
    rows = np.loadtxt(tmp_path / "c.txt")
    assert rows.shape == (3, 2)
