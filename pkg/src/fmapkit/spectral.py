"""Cotangent Laplacian, truncated eigenbasis, projection and HKS/WKS."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

COT_CLAMP = 1e4
DENSE_LIMIT = 400
CACHE_MAGIC = b"SPEC1"


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LaplaceOperators:
    """Cotangent stiffness (sparse, symmetric, PSD) and lumped diagonal mass."""

    stiffness: sp.csr_matrix
    mass: np.ndarray


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """First ``k`` Laplace-Beltrami eigenpairs, mass-orthonormal."""

    phi: np.ndarray
    evals: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        # one memory layout regardless of origin (solver, cache file, slicing), so
        # downstream BLAS calls accumulate in the same order and results are bitwise stable
        object.__setattr__(self, "phi", np.ascontiguousarray(self.phi, dtype=np.float64))
        object.__setattr__(self, "evals", np.ascontiguousarray(self.evals, dtype=np.float64))
        object.__setattr__(self, "mass", np.ascontiguousarray(self.mass, dtype=np.float64))

    @property
    def k(self):
        return self.phi.shape[1]

    @property
    def n(self):
        return self.phi.shape[0]

    def truncate(self, k):
        if k > self.k:
            raise ValueError(f"basis has only {self.k} functions, asked for {k}")
        return SpectralBasis(self.phi[:, :k], self.evals[:k], self.mass)

    def permuted(self, perm):
        return SpectralBasis(self.phi[perm], self.evals, self.mass[perm])


DESCRIPTOR_KINDS = ("hks", "wks", "xyz", "learned")


@dataclass(frozen=True, eq=False)
class DescriptorField:
    values: np.ndarray
    kind: str = "learned"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError("descriptor values must be (n, d) with d >= 1")
        if not np.isfinite(v).all():
            raise ValueError("descriptor values must be finite")
        if self.kind not in DESCRIPTOR_KINDS:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[1]


def _cot(a, b):
    """Cotangent of the angle between edge vectors ``a`` and ``b`` (row-wise)."""
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    dot = (a * b).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cot = dot / cross
    cot = np.where(cross > 0, cot, np.sign(dot) * COT_CLAMP)
    return np.clip(cot, -COT_CLAMP, COT_CLAMP)


def cotan_laplacian(mesh):
    """Assemble the cotangent stiffness matrix and the lumped mass.

    Off-diagonal entries are ``-(cot a + cot b) / 2`` over the two angles
    opposite each edge; the diagonal makes every row sum to zero.
    """
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    rows, cols, vals = [], [], []
    for corner in range(3):
        i, j, o = f[:, (corner + 1) % 3], f[:, (corner + 2) % 3], f[:, corner]
        w = -0.5 * _cot(v[i] - v[o], v[j] - v[o])
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    if not np.isfinite(vals).all():
        raise ValueError("non-finite cotangent weight")
    off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = (off + sp.diags(diag)).tocsr()
    stiffness.sum_duplicates()
    return LaplaceOperators(stiffness, mesh.vertex_masses.copy())


def _fix_signs(phi):
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def eigendecompose(ops, k):
    """``k`` smallest generalized eigenpairs of ``stiffness phi = mu mass phi``.

    Small problems use a dense symmetric solver; larger ones use shift-invert
    Lanczos just below zero with a fixed-seed random start vector (a
    constant start vector is too symmetric on regular meshes and misses
    members of degenerate eigenvalue clusters).
    Columns are mass-orthonormal, sign-fixed so the largest-magnitude entry
    is positive.
    """
    n = ops.stiffness.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    mass = ops.mass
    if n <= DENSE_LIMIT:
        evals, phi = scipy.linalg.eigh(
            ops.stiffness.toarray(), np.diag(mass), subset_by_index=(0, k - 1)
        )
    else:
        scale = ops.stiffness.diagonal().mean() / mass.mean()
        # Extra eigenpairs keep Lanczos from skipping members of degenerate
        # clusters near the cut; they are discarded below.
        k_solve = min(n - 1, k + max(10, k // 2))
        try:
            evals, phi = eigsh(
                ops.stiffness.tocsc(),
                k=k_solve,
                M=sp.diags(mass).tocsc(),
                sigma=-1e-8 * scale,
                which="LM",
                v0=np.random.default_rng(0).uniform(0.5, 1.5, n),
                maxiter=100 * k_solve,
                tol=1e-10,
            )
        except ArpackNoConvergence as exc:
            raise EigenSolverError(f"eigensolver did not converge for k={k}") from exc
    order = np.argsort(evals, kind="stable")[:k]
    evals, phi = evals[order], phi[:, order]
    evals = np.maximum(evals, 0.0)
    norms = np.sqrt((phi**2 * mass[:, None]).sum(axis=0))
    phi = _fix_signs(phi / norms)
    return SpectralBasis(phi, evals, mass.copy())


def mesh_basis(mesh, k):
    """Convenience: Laplacian then eigenbasis of a mesh."""
    return eigendecompose(cotan_laplacian(mesh), k)


def project(basis, field):
    """Spectral coefficients ``phi^T M F`` (k x d) of a per-vertex field."""
    values = field.values if isinstance(field, DescriptorField) else np.asarray(field)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != basis.n:
        raise ValueError(f"field has {values.shape[0]} rows, basis has {basis.n}")
    return basis.phi.T @ (basis.mass[:, None] * values)


def reconstruct(basis, coeffs, kind="learned"):
    coeffs = np.asarray(coeffs)
    if coeffs.ndim == 1:
        coeffs = coeffs[:, None]
    if coeffs.shape[0] != basis.k:
        raise ValueError(f"expected {basis.k} coefficient rows, got {coeffs.shape[0]}")
    return DescriptorField(basis.phi @ coeffs, kind)


def hks(basis, times):
    """Heat kernel signature, one column per diffusion time."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if (times <= 0).any():
        raise ValueError("HKS times must be positive")
    weights = np.exp(-np.outer(basis.evals, times))
    return DescriptorField(basis.phi**2 @ weights, "hks")


def hks_default_times(basis, count=16):
    nonzero = basis.evals[basis.evals > 1e-12]
    return np.geomspace(4 * np.log(10) / nonzero[-1], 4 * np.log(10) / nonzero[0], count)


def wks_default_energies(basis, count=100):
    """Energies evenly spread in the log-eigenvalue range, with sigma."""
    logs = np.log(basis.evals[basis.evals > 1e-12])
    lo, hi = logs.min(), logs.max()
    sigma = 7.0 * (hi - lo) / count
    return np.linspace(lo + 2 * sigma, hi - 2 * sigma, count), sigma


def wks(basis, energies=None, sigma=None):
    """Wave kernel signature with Gaussian energy filters in log-eigenvalue."""
    if energies is None:
        energies, default_sigma = wks_default_energies(basis)
        sigma = default_sigma if sigma is None else sigma
    if sigma is None or not sigma > 0:
        raise ValueError("sigma must be positive")
    energies = np.atleast_1d(np.asarray(energies, dtype=np.float64))
    keep = basis.evals > 1e-12
    logs = np.log(basis.evals[keep])
    weights = np.exp(-((energies[None, :] - logs[:, None]) ** 2) / (2 * sigma**2))
    totals = weights.sum(axis=0)
    if (totals <= 0).any():
        raise ValueError("all WKS filter weights underflow for some energy")
    return DescriptorField(basis.phi[:, keep] ** 2 @ (weights / totals), "wks")


def xyz_descriptor(mesh):
    """Constant channel plus centered coordinates."""
    v = mesh.vertices - mesh.centroid
    return DescriptorField(np.column_stack([np.ones(len(v)), v]), "xyz")


# ---------------------------------------------------------------------------
# Binary cache


def save_basis(basis, path, source_hash):
    """Write the ``SPEC1`` cache: header, phi, evals, masses, source hash."""
    if len(source_hash) != 32:
        raise ValueError("source hash must be 32 bytes")
    n, k = basis.phi.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", n, k))
        fh.write(np.ascontiguousarray(basis.phi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.evals, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.mass, dtype="<f8").tobytes())
        fh.write(source_hash)


def load_basis(path):
    """Read a ``SPEC1`` cache; returns ``(basis, source_hash)``."""
    data = Path(path).read_bytes()
    if data[:5] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a spectral cache file")
    n, k = struct.unpack_from("<II", data, 5)
    expected = 5 + 8 + 8 * (n * k + k + n) + 32
    if len(data) != expected:
        raise ValueError(f"{path}: truncated spectral cache ({len(data)} of {expected} bytes)")
    off = 13
    phi = np.frombuffer(data, "<f8", n * k, off).reshape(n, k).astype(np.float64)
    off += 8 * n * k
    evals = np.frombuffer(data, "<f8", k, off).astype(np.float64)
    off += 8 * k
    mass = np.frombuffer(data, "<f8", n, off).astype(np.float64)
    off += 8 * n
    return SpectralBasis(phi, evals, mass), data[off : off + 32]
