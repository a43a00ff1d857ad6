"""Procedural test shapes and deformations with known correspondence."""

import numpy as np

from .mesh import AXES, Mesh, axis_rotation


def icosphere(subdivisions=2, radius=1.0):
    """Subdivided icosahedron projected on a sphere (10*4**s + 2 vertices)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(radius * np.array(verts), np.array(faces))


def uv_blob(rings=15, segments=20):
    """Closed latitude/longitude sphere with ``rings * segments + 2`` vertices."""
    theta = np.linspace(0, np.pi, rings + 2)[1:-1]
    phi = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    body = np.stack([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], -1)
    verts = np.concatenate([[[0, 1, 0]], body.reshape(-1, 3), [[0, -1, 0]]])
    south = len(verts) - 1

    def idx(r, s):
        return 1 + r * segments + s % segments

    faces = []
    for s in range(segments):
        faces.append((0, idx(0, s + 1), idx(0, s)))
        faces.append((south, idx(rings - 1, s), idx(rings - 1, s + 1)))
        for r in range(rings - 1):
            a, b = idx(r, s), idx(r, s + 1)
            c, d = idx(r + 1, s), idx(r + 1, s + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    return Mesh(verts, np.array(faces))


def jitter_radial(mesh, amplitude, rng):
    """Scale each vertex's distance to the centroid by ``1 + U(-a, a)``."""
    c = mesh.centroid
    scale = 1.0 + rng.uniform(-amplitude, amplitude, size=(mesh.n_vertices, 1))
    return mesh.with_vertices(c + (mesh.vertices - c) * scale)


def rotate_about_axis(mesh, angle, axis=None, center=None):
    """Rigid rotation about the mesh up axis (or ``axis``) through ``center``."""
    axis = mesh.up_axis if axis is None else axis
    center = mesh.centroid if center is None else center
    rot = axis_rotation(angle, axis)
    return mesh.with_vertices((mesh.vertices - center) @ rot.T + center)


def bumpy(mesh, rng, n_bumps=6, height=0.35, width=0.6):
    """Push the surface outward with random smooth Gaussian bumps.

    Breaks the symmetry of spheres so that spectra are non-degenerate.
    """
    v = mesh.vertices - mesh.centroid
    r = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / r
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    heights = height * rng.uniform(0.4, 1.0, size=n_bumps)
    ang = np.arccos(np.clip(u @ dirs.T, -1, 1))
    offset = (heights * np.exp(-((ang / width) ** 2))).sum(axis=1, keepdims=True)
    stretch = np.array([0.8, 1.3, 1.0])
    return mesh.with_vertices(mesh.centroid + u * (r + offset) * stretch)


def smooth_deform(mesh, rng, twist=0.6, bend=0.4, scale=0.1):
    """Smooth non-rigid deformation: twist and bend about the up axis.

    The twist angle and the bend offset vary with height so that distant
    parts of the shape move differently. Connectivity is preserved, so the
    identity is the ground-truth correspondence.
    """
    up = AXES[mesh.up_axis]
    j, k = [a for a in range(3) if a != up]
    c = mesh.centroid
    v = mesh.vertices - c
    h = v[:, up] / (np.abs(v[:, up]).max() + 1e-12)
    out = v.copy()
    angle = rng.uniform(-twist, twist) * h
    ca, sa = np.cos(angle), np.sin(angle)
    out[:, j] = ca * v[:, j] - sa * v[:, k]
    out[:, k] = sa * v[:, j] + ca * v[:, k]
    b = rng.uniform(-bend, bend, size=2)
    out[:, j] += b[0] * h**2
    out[:, k] += b[1] * h**2
    out *= 1.0 + rng.uniform(-scale, scale, size=3)
    return mesh.with_vertices(out + c)


def random_permutation(n, rng):
    return rng.permutation(n)


def base_shape(seed=0, rings=15, segments=20):
    """Asymmetric closed blob of ``rings * segments + 2`` vertices, unit area."""
    from .mesh import normalize_mesh

    rng = np.random.default_rng(seed)
    return normalize_mesh(bumpy(uv_blob(rings, segments), rng), "unit_area")


def deformation_dataset(n_shapes=8, n_pairs=20, seed=0, base=None, **deform):
    """Deformed copies of one base mesh plus random index pairs between them.

    Every shape shares the base connectivity, so the identity is the
    ground-truth vertex correspondence between any two of them. Returns
    ``(shapes, pairs)`` with ``pairs`` a list of ``(source, target)`` indices.
    """
    from .mesh import normalize_mesh

    rng = np.random.default_rng(seed)
    base = base_shape(seed) if base is None else base
    shapes = [normalize_mesh(smooth_deform(base, rng, **deform), "unit_area") for _ in range(n_shapes)]
    pairs = []
    while len(pairs) < n_pairs:
        i, j = rng.choice(n_shapes, size=2, replace=False)
        pairs.append((int(i), int(j)))
    return shapes, pairs
