"""Functional-map estimation, its gradient, the spectral loss and GT maps.

Convention: ``C`` has shape ``(k_N, k_M)`` and sends spectral coefficients
of functions on the source shape M to the target shape N, so ``C A ~ B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

DEFAULT_K = 30
DEFAULT_LAMBDA = 1e-3
RCOND_TOL = 1e-13
PINV_RTOL = 1e-10


class SingularSystemError(np.linalg.LinAlgError):
    """A functional-map normal system is (numerically) singular."""


@dataclass(frozen=True, eq=False)
class FuncMap:
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim != 2 or 0 in c.shape:
            raise ValueError(f"functional map must be a non-empty matrix, got {c.shape}")
        if not np.isfinite(c).all():
            raise ValueError("functional map has non-finite entries")
        object.__setattr__(self, "c", c)

    @property
    def target_k(self):
        return self.c.shape[0]

    @property
    def source_k(self):
        return self.c.shape[1]

    @property
    def shape(self):
        return self.c.shape


@dataclass(frozen=True, eq=False)
class GroundTruthMap(FuncMap):
    provenance: str = "loaded"


@dataclass(eq=False)
class SolveContext:
    """Inputs of the regularized solve plus per-row factorizations.

    ``a`` is ``(k_M, d)``, ``b`` is ``(k_N, d)``; eigenvalues are sorted.
    """

    a: np.ndarray
    b: np.ndarray
    evals_m: np.ndarray
    evals_n: np.ndarray
    lam: float = DEFAULT_LAMBDA
    _factors: list = field(default=None, repr=False)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.evals_m = np.asarray(self.evals_m, dtype=np.float64)
        self.evals_n = np.asarray(self.evals_n, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[1]:
            raise ValueError(f"incompatible descriptor shapes {self.a.shape}, {self.b.shape}")
        if self.a.shape[1] < 1:
            raise ValueError("need at least one descriptor")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if len(self.evals_m) != self.a.shape[0] or len(self.evals_n) != self.b.shape[0]:
            raise ValueError("eigenvalue counts must match descriptor rows")

    @property
    def penalty(self):
        """``(k_N, k_M)`` matrix of squared eigenvalue differences."""
        return (self.evals_m[None, :] - self.evals_n[:, None]) ** 2


def _factor(matrix, row):
    """Cholesky with a pivoted-LU fallback; raises on numerical singularity."""
    anorm = np.abs(matrix).sum(axis=0).max()
    if anorm == 0:
        raise SingularSystemError(f"row {row}: system matrix is zero")
    chol, info = lapack.dpotrf(matrix, lower=0, clean=1)
    if info == 0:
        rcond, _ = lapack.dpocon(chol, anorm)
        if rcond < RCOND_TOL:
            raise SingularSystemError(f"row {row}: singular system (rcond={rcond:.2e})")
        return ("chol", chol)
    lu, piv = scipy.linalg.lu_factor(matrix, check_finite=False)
    rcond, _ = lapack.dgecon(lu, anorm)
    if rcond < RCOND_TOL:
        raise SingularSystemError(f"row {row}: singular system (rcond={rcond:.2e})")
    return ("lu", (lu, piv))


def _solve(factor, rhs):
    kind, data = factor
    if kind == "chol":
        return scipy.linalg.cho_solve((data, False), rhs, check_finite=False)
    return scipy.linalg.lu_solve(data, rhs, check_finite=False)


def _row_factors(ctx):
    if ctx._factors is None:
        gram = ctx.a @ ctx.a.T
        pen = ctx.lam * ctx.penalty
        ctx._factors = [_factor(gram + np.diag(pen[i]), i) for i in range(len(pen))]
    return ctx._factors


def solve_regularized(ctx):
    """Minimize ``|CA - B|^2 + lam * |C L_M - L_N C|^2`` row by row.

    In the eigenbases both Laplacians are diagonal, so row ``i`` of ``C``
    solves ``(A A^T + lam diag((mu^M_j - mu^N_i)^2)) c_i = A b_i``.
    """
    factors = _row_factors(ctx)
    rhs = ctx.a @ ctx.b.T  # column i is A b_i
    c = np.empty((ctx.b.shape[0], ctx.a.shape[0]))
    for i, factor in enumerate(factors):
        c[i] = _solve(factor, rhs[:, i])
    return FuncMap(c)


def solve_unregularized(a, b):
    """Least-squares ``C = B A^T (A A^T)^-1``; singular when rank(A) < k_M."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] < a.shape[0]:
        raise SingularSystemError(
            f"only {a.shape[1]} descriptors for a {a.shape[0]}-dimensional basis"
        )
    factor = _factor(a @ a.T, "all")
    return FuncMap(_solve(factor, a @ b.T).T)


def solve_backward(ctx, c, upstream):
    """Gradients of a scalar loss w.r.t. ``A`` and ``B`` through the row solves.

    With ``M_i g_i = upstream_i`` (the adjoint), ``dB_i = A^T g_i`` and
    ``dA = sum_i g_i b_i^T - (g_i c_i^T + c_i g_i^T) A``.
    """
    c = c.c if isinstance(c, FuncMap) else np.asarray(c)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != c.shape:
        raise ValueError(f"upstream shape {upstream.shape} != map shape {c.shape}")
    factors = _row_factors(ctx)
    g = np.empty_like(upstream)
    for i, factor in enumerate(factors):
        g[i] = _solve(factor, upstream[i])
    grad_b = g @ ctx.a
    grad_a = g.T @ ctx.b - (g.T @ c + c.T @ g) @ ctx.a
    return grad_a, grad_b


def spectral_loss(c, gt):
    """Squared Frobenius distance to the ground-truth map and its gradient."""
    c = c.c if isinstance(c, FuncMap) else np.asarray(c)
    gt = gt.c if isinstance(gt, FuncMap) else np.asarray(gt)
    if c.shape != gt.shape:
        raise ValueError(f"map shape {c.shape} != ground-truth shape {gt.shape}")
    diff = c - gt
    return float((diff**2).sum()), 2.0 * diff


def gt_from_pointmap(basis_m, basis_n, t):
    """Functional map induced by a vertex map ``t: N -> M``.

    ``C = Phi_N^T diag(mass_N) Phi_M[t]``, i.e. the projection of the
    pulled-back source basis onto the target basis.
    """
    t = np.asarray(getattr(t, "assignment", t))
    if t.shape != (basis_n.n,):
        raise ValueError(f"point map has length {t.shape}, target has {basis_n.n} vertices")
    if t.size and (t.min() < 0 or t.max() >= basis_m.n):
        raise ValueError("point map assigns an out-of-range source vertex")
    c = basis_n.phi.T @ (basis_n.mass[:, None] * basis_m.phi[t])
    return GroundTruthMap(c, provenance="from_pointmap")


def pinv(matrix, rtol=PINV_RTOL):
    """Pseudo-inverse dropping singular values below ``rtol * sigma_max``."""
    u, s, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64), full_matrices=False)
    keep = s > rtol * s[0] if s.size else s.astype(bool)
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def gt_from_template(c_i, c_j):
    """Map ``S_i -> S_j`` from template maps ``T -> S_i`` and ``T -> S_j``."""
    c_i = c_i.c if isinstance(c_i, FuncMap) else np.asarray(c_i)
    c_j = c_j.c if isinstance(c_j, FuncMap) else np.asarray(c_j)
    if c_i.shape[1] != c_j.shape[1]:
        raise ValueError("template maps must share the template basis width")
    return GroundTruthMap(pinv(c_j) @ c_i, provenance="from_template_composition")


def orthonormalize(c):
    """Nearest matrix with orthonormal columns/rows (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(c.c if isinstance(c, FuncMap) else c, full_matrices=False)
    return FuncMap(u @ vt)


def write_fmap(c, path):
    c = c.c if isinstance(c, FuncMap) else np.asarray(c)
    lines = [f"FMAP {c.shape[0]} {c.shape[1]}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in c]
    Path(path).write_text("\n".join(lines) + "\n")


def read_fmap(path):
    lines = Path(path).read_text().split("\n")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "FMAP":
        raise ValueError(f"{path}: missing 'FMAP k_N k_M' header")
    rows, cols = int(header[1]), int(header[2])
    data = np.array([[float(x) for x in line.split()] for line in lines[1 : rows + 1]])
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: expected {rows}x{cols} values, got {data.shape}")
    return GroundTruthMap(data, provenance="loaded")
