"""Triangle meshes, point clouds, grid subsampling and radius queries."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

AXES = {"X": 0, "Y": 1, "Z": 2}


class MeshParseError(ValueError):
    """Malformed OFF/PLY header or token."""


class MeshTopologyError(ValueError):
    """Face indices that do not describe a valid triangle mesh."""


class HierarchyError(ValueError):
    """A subsampling level became too coarse to be useful."""


def face_areas(vertices, faces):
    """Area of every triangle, computed from the cross product of two edges."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def lumped_masses(vertices, faces):
    """Barycentric lumped mass: one third of the incident triangle areas."""
    n = len(vertices)
    third = np.repeat(face_areas(vertices, faces) / 3.0, 3)
    return np.bincount(np.asarray(faces).ravel(), weights=third, minlength=n)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with lumped vertex masses.

    Parameters
    ----------
    vertices : ndarray, shape (n, 3)
    faces : ndarray, shape (f, 3)
        Zero-based vertex indices, counter-clockwise.
    vertex_masses : ndarray, shape (n,), optional
        Computed from the faces when omitted.
    up_axis : {"X", "Y", "Z"}
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_masses: np.ndarray = None
    up_axis: str = "Y"

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshTopologyError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshTopologyError(f"faces must be (f, 3), got {f.shape}")
        _check_faces(f, len(v))
        if self.up_axis not in AXES:
            raise ValueError(f"up_axis must be one of X, Y, Z, got {self.up_axis!r}")
        masses = self.vertex_masses
        masses = lumped_masses(v, f) if masses is None else np.asarray(masses, dtype=np.float64)
        v.setflags(write=False)
        f.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "vertex_masses", masses)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def area(self):
        return float(face_areas(self.vertices, self.faces).sum())

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    def edges(self):
        """Unique undirected edges as a sorted (e, 2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def with_vertices(self, vertices):
        """Same connectivity, new positions; masses are recomputed."""
        return replace(self, vertices=vertices, vertex_masses=None)

    def permuted(self, perm):
        """Copy whose vertex ``i`` is vertex ``perm[i]`` of this mesh."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return Mesh(self.vertices[perm], inverse[self.faces], up_axis=self.up_axis)

    def content_hash(self):
        """32-byte SHA-256 digest of positions and connectivity."""
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.digest()

    def to_pointcloud(self):
        return PointCloud(self.vertices)


def _check_faces(faces, n):
    if faces.size == 0:
        return
    if faces.min() < 0 or faces.max() >= n:
        bad = int(faces.max() if faces.max() >= n else faces.min())
        raise MeshTopologyError(f"face index {bad} out of range for {n} vertices")
    repeated = (
        (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    )
    if repeated.any():
        raise MeshTopologyError(f"face {int(np.flatnonzero(repeated)[0])} repeats a vertex")


def axis_rotation(angle, axis):
    """3x3 rotation matrix of ``angle`` radians about a coordinate axis."""
    i = AXES[axis]
    j, k = [a for a in range(3) if a != i]
    c, s = np.cos(angle), np.sin(angle)
    rot = np.eye(3)
    rot[j, j], rot[j, k], rot[k, j], rot[k, k] = c, -s, s, c
    return rot


# ---------------------------------------------------------------------------
# File IO


def _content_lines(text):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _parse_off(lines):
    header = next(lines, None)
    if header is None:
        raise MeshParseError("empty OFF file")
    tokens = header.split()
    if tokens[0] != "OFF":
        raise MeshParseError(f"expected 'OFF' header, got {tokens[0]!r}")
    counts = tokens[1:] if len(tokens) > 1 else next(lines, "").split()
    try:
        n, nf = int(counts[0]), int(counts[1])
    except (IndexError, ValueError) as exc:
        raise MeshParseError(f"bad OFF counts line: {' '.join(counts)!r}") from exc
    vertices = []
    for _ in range(n):
        vertices.append(_floats(next(lines, None), 3))
    faces = []
    for _ in range(nf):
        faces.append(_face(next(lines, None)))
    return vertices, faces


def _parse_ply(lines):
    if next(lines, None) != "ply":
        raise MeshParseError("missing 'ply' magic")
    fmt = next(lines, "")
    if fmt.split()[:2] != ["format", "ascii"]:
        raise MeshParseError(f"only ASCII PLY is supported, got {fmt!r}")
    elements = []  # (name, count, [property names])
    for line in lines:
        tokens = line.split()
        if tokens[0] == "end_header":
            break
        if tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError("property before any element")
            elements[-1][2].append(tokens[-1])
        elif tokens[0] not in ("comment", "obj_info"):
            raise MeshParseError(f"unexpected PLY header line {line!r}")
    else:
        raise MeshParseError("missing end_header")
    vertices, faces = [], []
    for name, count, props in elements:
        for _ in range(count):
            line = next(lines, None)
            if name == "vertex":
                values = _floats(line, len(props))
                try:
                    vertices.append([values[props.index(a)] for a in "xyz"])
                except ValueError as exc:
                    raise MeshParseError("vertex element lacks x/y/z") from exc
            elif name == "face":
                faces.append(_face(line))
    return vertices, faces


def _floats(line, count):
    if line is None:
        raise MeshParseError("unexpected end of file")
    try:
        values = [float(t) for t in line.split()[:count]]
    except ValueError as exc:
        raise MeshParseError(f"bad numeric token in {line!r}") from exc
    if len(values) < count:
        raise MeshParseError(f"expected {count} values in {line!r}")
    return values


def _face(line):
    if line is None:
        raise MeshParseError("unexpected end of file")
    try:
        tokens = [int(t) for t in line.split()]
    except ValueError as exc:
        raise MeshParseError(f"bad face line {line!r}") from exc
    if not tokens or tokens[0] != 3 or len(tokens) < 4:
        raise MeshParseError(f"only triangular faces are supported: {line!r}")
    return tokens[1:4]


def load_mesh(path, up_axis="Y"):
    """Read an ASCII OFF or PLY triangle mesh.

    Zero-area faces are dropped with a warning. Raises ``MeshParseError`` for
    malformed files and ``MeshTopologyError`` for invalid connectivity.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshParseError(f"{path}: binary files are not supported") from exc
    lines = _content_lines(text)
    first = text.lstrip()[:3]
    if first == "ply":
        vertices, faces = _parse_ply(lines)
    elif first == "OFF":
        vertices, faces = _parse_off(lines)
    else:
        raise MeshParseError(f"{path}: unknown mesh format")
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if not np.isfinite(v).all():
        raise MeshParseError(f"{path}: non-finite vertex coordinate")
    _check_faces(f, len(v))
    areas = face_areas(v, f)
    degenerate = areas <= 0.0
    if degenerate.any():
        logger.warning("%s: dropped %d zero-area faces", path, int(degenerate.sum()))
        f = f[~degenerate]
    if len(v) < 4 or len(f) < 1:
        raise MeshTopologyError(f"{path}: need at least 4 vertices and 1 face")
    return Mesh(v, f, up_axis=up_axis)


def save_off(mesh, path):
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    lines += [" ".join(repr(float(c)) for c in row) for row in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_mesh(mesh, mode="unit_area"):
    """Rescale a mesh about its centroid.

    ``unit_area`` divides coordinates by the square root of the surface area,
    ``unit_max_extent`` by the largest bounding-box side, ``none`` is identity.
    """
    if mode == "none":
        return mesh
    if mode == "unit_area":
        scale = np.sqrt(mesh.area)
    elif mode == "unit_max_extent":
        scale = float(np.ptp(mesh.vertices, axis=0).max())
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if not scale > 0:
        raise ValueError("cannot normalize a mesh with zero area")
    c = mesh.centroid
    return mesh.with_vertices(c + (mesh.vertices - c) / scale)


# ---------------------------------------------------------------------------
# Point clouds and grid pooling


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A set of 3D points.

    ``parent_indices``, when set on a subsampled cloud, has one entry per
    point of the finer cloud it was pooled from and gives the index of the
    cell (point of this cloud) that absorbed it.
    """

    points: np.ndarray
    parent_indices: np.ndarray | None = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(p).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.parent_indices is not None:
            idx = np.asarray(self.parent_indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= len(p)):
                raise ValueError("parent_indices out of range")
            object.__setattr__(self, "parent_indices", idx)

    def __len__(self):
        return len(self.points)


def grid_subsample(points, cell_size):
    """Replace the points of every occupied grid cell by their barycenter.

    Cells are half-open ``[k*s, (k+1)*s)`` boxes anchored at the origin and
    the output is ordered lexicographically by integer cell coordinate.
    """
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    cells = np.floor(pts / cell_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return PointCloud(sums / counts[:, None], parent_indices=inverse)


@dataclass(frozen=True, eq=False)
class SamplingHierarchy:
    """Nested grid subsamplings of a base cloud.

    ``levels[i]`` is pooled from ``levels[i-1]`` (``levels[0]`` from
    ``source``) and carries the pooling map in its ``parent_indices``.
    """

    source: PointCloud
    levels: list
    cell_sizes: list

    def __len__(self):
        return len(self.levels)

    def cloud(self, level):
        """Cloud at ``level``; ``-1`` is the unpooled source."""
        return self.source if level < 0 else self.levels[level]

    def source_to_level(self, level):
        """For every source point, the index of its cell at ``level``."""
        if level < 0:
            return np.arange(len(self.source))
        index = self.levels[0].parent_indices
        for lv in self.levels[1 : level + 1]:
            index = lv.parent_indices[index]
        return index


def build_hierarchy(points, base_cell, num_levels, min_points=4):
    """Grid pyramid with cell size ``base_cell * 2**i`` at level ``i``."""
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    source = points if isinstance(points, PointCloud) else PointCloud(points)
    levels, sizes = [], []
    current = source
    for i in range(num_levels):
        size = base_cell * 2.0**i
        current = grid_subsample(current, size)
        if len(current) < min_points:
            raise HierarchyError(
                f"level {i} (cell {size:g}) collapsed to {len(current)} points"
            )
        levels.append(current)
        sizes.append(size)
    return SamplingHierarchy(source, levels, sizes)


def radius_neighbors(queries, support, radius):
    """Indices of support points strictly closer than ``radius`` to each query.

    Returns a list of ascending int64 arrays, one per query.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    q = queries.points if isinstance(queries, PointCloud) else np.asarray(queries, dtype=np.float64)
    s = support.points if isinstance(support, PointCloud) else np.asarray(support, dtype=np.float64)
    tree = cKDTree(s)
    # the tree uses <=; pad the radius, then filter strictly on exact distances
    candidates = tree.query_ball_point(q, radius * (1.0 + 1e-9) + 1e-300, return_sorted=True)
    padded = pad_neighbors(candidates, fill=-1)
    valid = padded >= 0
    diff = s[np.where(valid, padded, 0)] - q[:, None, :]
    keep = valid & (np.sqrt(np.einsum("qmc,qmc->qm", diff, diff)) < radius)
    return [row[mask] for row, mask in zip(padded, keep)]


def pad_neighbors(neighbors, fill):
    """Stack ragged neighbor lists into a (q, max_len) array padded with ``fill``."""
    width = max((len(n) for n in neighbors), default=0)
    out = np.full((len(neighbors), max(width, 1)), fill, dtype=np.int64)
    for i, n in enumerate(neighbors):
        out[i, : len(n)] = n
    return out
