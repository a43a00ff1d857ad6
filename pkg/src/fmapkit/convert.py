"""Point-map recovery from functional maps, ICP and ZoomOut refinement.

Point maps go from the target N to the source M (``t[j]`` is a vertex of
M), matching functional maps that send functions on M to functions on N.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .fmap import FuncMap, gt_from_pointmap, orthonormalize


@dataclass(frozen=True, eq=False)
class PointMap:
    assignment: np.ndarray
    n_source: int
    confidence: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.assignment, dtype=np.int64).ravel()
        if t.size and (t.min() < 0 or t.max() >= self.n_source):
            raise ValueError(f"assignment out of range [0, {self.n_source})")
        object.__setattr__(self, "assignment", t)

    def __len__(self):
        return len(self.assignment)

    def __array__(self, dtype=None, copy=None):
        return self.assignment if dtype is None else self.assignment.astype(dtype)


def _sq_dists(points, query):
    diff = points - query
    return np.einsum("ij,ij->i", diff, diff)


def nearest_neighbors(points, queries, workers=1):
    """Exact nearest point for every query, ties going to the lowest index.

    A kd-tree proposes the nearest distance; every point within a hair of it
    is then rescored exactly so the result equals a brute-force argmin.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    tree = cKDTree(points)
    dist, _ = tree.query(queries, k=1, workers=workers)
    radii = dist * (1.0 + 1e-7) + 1e-12
    candidates = tree.query_ball_point(queries, radii, workers=workers)
    out = np.empty(len(queries), dtype=np.int64)
    for j, cand in enumerate(candidates):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        out[j] = cand[np.argmin(_sq_dists(points[cand], queries[j]))]
    return out


def fmap_to_pointmap(c, basis_m, basis_n, workers=1):
    """Nearest-neighbor matching of ``Phi_N C`` rows against ``Phi_M`` rows."""
    c = c.c if isinstance(c, FuncMap) else np.asarray(c)
    k_n, k_m = c.shape
    emb_n = basis_n.phi[:, :k_n] @ c
    emb_m = basis_m.phi[:, :k_m]
    return PointMap(nearest_neighbors(emb_m, emb_n, workers), basis_m.n)


def icp_refine(c, basis_m, basis_n, iterations=10, workers=1):
    """Alternate point-map extraction with orthonormal projection of ``C``."""
    c = c if isinstance(c, FuncMap) else FuncMap(c)
    if c.shape[0] != c.shape[1]:
        raise ValueError("ICP refinement needs a square functional map")
    k = c.shape[0]
    bm, bn = basis_m.truncate(k), basis_n.truncate(k)
    previous = None
    for _ in range(iterations):
        t = fmap_to_pointmap(c, bm, bn, workers)
        if previous is not None and np.array_equal(t.assignment, previous):
            break
        c = orthonormalize(gt_from_pointmap(bm, bn, t))
        previous = t.assignment
    return c


def zoomout(c0, basis_m, basis_n, k1, step=1, workers=1):
    """Spectral upsampling: grow the map from its width to ``k1``.

    Each round converts the current map to a point map and re-estimates the
    functional map ``step`` basis functions wider; the last round is
    truncated so the output is exactly ``k1 x k1``.
    """
    c = c0.c if isinstance(c0, FuncMap) else np.asarray(c0)
    k0 = c.shape[0]
    if c.shape[0] != c.shape[1]:
        raise ValueError("ZoomOut needs a square initial map")
    if step < 1:
        raise ValueError("step must be >= 1")
    if not k0 <= k1:
        raise ValueError(f"target width {k1} is below the initial width {k0}")
    if k1 > min(basis_m.k, basis_n.k):
        raise ValueError(f"bases have {min(basis_m.k, basis_n.k)} functions, need {k1}")
    widths = list(range(k0 + step, k1, step)) + [k1]
    for width in widths:
        k = c.shape[0]
        t = fmap_to_pointmap(c, basis_m.truncate(k), basis_n.truncate(k), workers)
        c = gt_from_pointmap(basis_m.truncate(width), basis_n.truncate(width), t).c
    return FuncMap(c)


def write_pointmap(t, path):
    lines = [f"P2P {len(t)} {t.n_source}"]
    lines += [f"{j} {i}" for j, i in enumerate(t.assignment)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pointmap(path):
    lines = Path(path).read_text().split("\n")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "P2P":
        raise ValueError(f"{path}: missing 'P2P n_N n_M' header")
    n_n, n_m = int(header[1]), int(header[2])
    t = np.full(n_n, -1, dtype=np.int64)
    for line in lines[1:]:
        if line.strip():
            j, i = (int(x) for x in line.split())
            t[j] = i
    if (t < 0).any():
        raise ValueError(f"{path}: missing assignments for {int((t < 0).sum())} vertices")
    return PointMap(t, n_m)
