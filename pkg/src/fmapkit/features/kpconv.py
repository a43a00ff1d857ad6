"""Rigid kernel-point convolution on point clouds, forward and backward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..mesh import PointCloud, pad_neighbors, radius_neighbors


def kernel_influence(y, z, sigma):
    """Linear correlation ``max(0, 1 - |y - z| / sigma)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = np.linalg.norm(np.asarray(y, dtype=np.float64) - np.asarray(z, dtype=np.float64), axis=-1)
    return np.maximum(0.0, 1.0 - d / sigma)


def fibonacci_kernel_points(count, radius):
    """One point at the origin plus ``count - 1`` on a sphere of ``0.75 * radius``."""
    if count < 1:
        raise ValueError("need at least one kernel point")
    shell = count - 1
    pts = [np.zeros(3)]
    if shell:
        i = np.arange(shell) + 0.5
        polar = np.arccos(1 - 2 * i / shell)
        azimuth = np.pi * (1 + 5**0.5) * i
        sphere = np.column_stack(
            [np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)]
        )
        pts.append(0.75 * radius * sphere)
    return np.vstack(pts)


@dataclass(frozen=True, eq=False)
class KernelParams:
    kernel_points: np.ndarray  # (K, 3)
    weights: np.ndarray  # (K, D, D')
    radius: float
    influence: float

    def __post_init__(self):
        z = np.asarray(self.kernel_points, dtype=np.float64).reshape(-1, 3)
        if len(z) < 1:
            raise ValueError("need at least one kernel point")
        if (np.linalg.norm(z, axis=1) > self.radius * (1 + 1e-12)).any():
            raise ValueError("kernel points must lie inside the kernel radius")
        if not self.influence > 0:
            raise ValueError("influence must be positive")
        w = np.asarray(self.weights)
        if w.ndim != 3 or w.shape[0] != len(z):
            raise ValueError(f"weights must be (K, D, D'), got {w.shape}")
        object.__setattr__(self, "kernel_points", z)
        object.__setattr__(self, "weights", w)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[2]


@dataclass(frozen=True, eq=False)
class ConvGeometry:
    """Padded neighbor indices and their kernel influences ``(q, m, K)``."""

    index: np.ndarray
    influence: np.ndarray
    n_support: int
    scatter: sp.csr_matrix  # (n_support, q * m) sums gathered rows back


def conv_geometry(support, queries, kernel_points, sigma, neighbors=None, radius=None, dtype=None):
    """Precompute everything the convolution needs besides features and weights."""
    sup = support.points if isinstance(support, PointCloud) else np.asarray(support, np.float64)
    qry = queries.points if isinstance(queries, PointCloud) else np.asarray(queries, np.float64)
    if neighbors is None:
        neighbors = radius_neighbors(qry, sup, radius)
    index = pad_neighbors(neighbors, fill=-1)
    valid = index >= 0
    rel = sup[np.where(valid, index, 0)] - qry[:, None, :]
    sq = (
        np.einsum("qmc,qmc->qm", rel, rel)[:, :, None]
        - 2.0 * rel @ kernel_points.T
        + (kernel_points**2).sum(axis=1)
    )
    d = np.sqrt(np.maximum(sq, 0.0))
    h = np.maximum(0.0, 1.0 - d / sigma) * valid[:, :, None]
    if dtype is not None:
        h = h.astype(dtype)
    index = np.where(valid, index, 0)
    scatter = sp.csr_matrix(
        (np.ones(int(valid.sum()), dtype=h.dtype), (index[valid], np.flatnonzero(valid))),
        shape=(len(sup), index.size),
    )
    return ConvGeometry(index, h, len(sup), scatter)


def kpconv_forward(geometry, feats, weights):
    """``out(x) = sum_i sum_k h(x_i - x, z_k) f_i W_k`` over radius neighbors.

    Returns the output and the per-kernel aggregated features needed by
    the backward pass.
    """
    if feats.shape[0] != geometry.n_support:
        raise ValueError(f"features have {feats.shape[0]} rows, support has {geometry.n_support}")
    if feats.shape[1] != weights.shape[1]:
        raise ValueError(f"feature dim {feats.shape[1]} != kernel input dim {weights.shape[1]}")
    gathered = feats[geometry.index]  # (q, m, D)
    aggregated = np.matmul(geometry.influence.transpose(0, 2, 1), gathered)  # (q, K, D)
    q, k, d = aggregated.shape
    return aggregated.reshape(q, k * d) @ weights.reshape(k * d, -1), aggregated


def kpconv_backward(geometry, aggregated, weights, upstream):
    """Reverse-mode gradients w.r.t. input features and kernel weights."""
    q, k, d = aggregated.shape
    flat_w = weights.reshape(k * d, -1)
    grad_w = (aggregated.reshape(q, k * d).T @ upstream).reshape(weights.shape)
    grad_agg = (upstream @ flat_w.T).reshape(q, k, d)
    grad_gathered = np.matmul(geometry.influence, grad_agg)  # (q, m, D)
    grad_feats = geometry.scatter @ grad_gathered.reshape(-1, d)
    return grad_feats, grad_w


def kpconv(support, queries, feats, kernel, neighbors=None):
    """One-shot convolution with a :class:`KernelParams`."""
    geometry = conv_geometry(
        support, queries, kernel.kernel_points, kernel.influence, neighbors, kernel.radius
    )
    return kpconv_forward(geometry, feats, kernel.weights)[0]
