"""Edge-graph geodesics and the mean geodesic correspondence error."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GeodesicField:
    distances: np.ndarray
    normalization: float

    @property
    def disconnected(self):
        return ~np.isfinite(self.distances)


def edge_graph(mesh):
    """Sparse symmetric graph of mesh edges weighted by Euclidean length."""
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    g = sp.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))
    return (g + g.T).tocsr()


def geodesic_from(mesh, source):
    """Dijkstra distances from one vertex; unreachable vertices are ``inf``."""
    d = dijkstra(edge_graph(mesh), directed=False, indices=int(source))
    if not np.isfinite(d).all():
        logger.warning("%d vertices unreachable from %d", int((~np.isfinite(d)).sum()), source)
    return GeodesicField(d, float(np.sqrt(mesh.area)))


def pointwise_geodesic_errors(pred, gt, mesh_m, graph=None):
    """Normalized distance between predicted and true images of each vertex."""
    pred = np.asarray(getattr(pred, "assignment", pred))
    gt = np.asarray(getattr(gt, "assignment", gt))
    if pred.shape != gt.shape:
        raise ValueError(f"map lengths differ: {pred.shape} vs {gt.shape}")
    graph = edge_graph(mesh_m) if graph is None else graph
    sources, inverse = np.unique(gt, return_inverse=True)
    dist = dijkstra(graph, directed=False, indices=sources)
    errors = dist[inverse.ravel(), pred]
    return errors / np.sqrt(mesh_m.area)


def mean_geodesic_error(pred, gt, mesh_m, graph=None):
    """Mean normalized geodesic error over target vertices.

    Unreachable pairs are excluded from the mean (and logged). Multiply by
    100 for the customary table scale.
    """
    errors = pointwise_geodesic_errors(pred, gt, mesh_m, graph)
    finite = np.isfinite(errors)
    if not finite.all():
        logger.warning("excluding %d disconnected vertex pairs", int((~finite).sum()))
    return float(errors[finite].mean()) if finite.any() else float("nan")


def accuracy_curve(errors, thresholds):
    """Fraction of errors at or below each threshold."""
    errors = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if (np.diff(thresholds) < 0).any():
        raise ValueError("thresholds must be ascending")
    if errors.size == 0:
        return np.zeros(len(thresholds))
    return np.searchsorted(errors, thresholds, side="right") / errors.size


def write_report(path, errors, thresholds, pairs=1, curve_path=None):
    """JSON report plus an optional two-column text curve."""
    errors = np.asarray(errors, dtype=np.float64)
    finite = errors[np.isfinite(errors)]
    mean = float(finite.mean()) if finite.size else float("nan")
    fractions = accuracy_curve(finite, thresholds)
    report = {
        "pairs": int(pairs),
        "mean_error": mean,
        "mean_error_x100": 100.0 * mean,
        "excluded": int(errors.size - finite.size),
        "curve": [[float(t), float(f)] for t, f in zip(thresholds, fractions)],
    }
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
    if curve_path is not None:
        Path(curve_path).write_text(
            "".join(f"{t:.6g} {f:.6g}\n" for t, f in report["curve"])
        )
    return report
