"""Reduced-depth KPConv encoder/decoder producing per-vertex descriptors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..mesh import build_hierarchy
from ..spectral import DescriptorField
from .kpconv import (
    KernelParams,
    conv_geometry,
    fibonacci_kernel_points,
    kpconv_backward,
    kpconv_forward,
)


@dataclass
class ExtractorConfig:
    """Architecture hyperparameters; JSON round-trippable.

    ``block_dims`` are the output widths of the strided conv blocks, one per
    pooling level. ``up_dims`` are the widths of the decoder stages, each
    going back one level; the last one is the descriptor dimension.
    """

    in_dim: int = 4
    block_dims: list = field(default_factory=lambda: [16, 32, 64])
    up_dims: list = field(default_factory=lambda: [32, 32])
    kernel_size: int = 15
    radius_mult: float = 2.5
    sigma_mult: float = 1.0
    leaky_slope: float = 0.1
    base_cell: float = 0.03
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.up_dims) >= len(self.block_dims):
            raise ValueError("need fewer decoder stages than conv blocks")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")

    @property
    def output_dim(self):
        return self.up_dims[-1] if self.up_dims else self.block_dims[-1]

    @property
    def num_levels(self):
        return len(self.block_dims)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_grad(x, slope, upstream):
    return np.where(x > 0, upstream, slope * upstream)


def input_features(points, dtype=np.float32):
    """Constant channel plus coordinates relative to the centroid."""
    p = np.asarray(points, dtype=np.float64)
    return np.column_stack([np.ones(len(p)), p - p.mean(axis=0)]).astype(dtype)


class ExtractorNet:
    """Strided KPConv blocks, then parent upsampling with skip connections.

    Block ``b`` convolves features living on level ``b-1`` (level ``-1``
    being the input points) at the points of level ``b``. Decoder stage
    ``u`` copies level ``L-1-u`` features to their children on level
    ``L-2-u``, concatenates that level's encoder features and applies a
    pointwise linear map. The finest level is finally copied back to the
    input points.
    """

    def __init__(self, config=None, params=None, seed=0):
        self.config = config or ExtractorConfig()
        self.dtype = np.dtype(self.config.dtype)
        cfg = self.config
        self.shapes = []
        dims = [cfg.in_dim] + list(cfg.block_dims)
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            self.shapes.append((cfg.kernel_size, d_in, d_out))
        coarse = cfg.block_dims[-1]
        for u, d_out in enumerate(cfg.up_dims):
            skip = cfg.block_dims[-2 - u]
            self.shapes.append((coarse + skip, d_out))
            coarse = d_out
        if params is None:
            params = self.init_params(seed)
        self.set_params(params)

    @property
    def num_params(self):
        return int(sum(np.prod(s) for s in self.shapes))

    def init_params(self, seed):
        """Uniform ``+-sqrt(6 / (D + D'))`` per weight matrix."""
        rng = np.random.default_rng(seed)
        out = []
        for s in self.shapes:
            bound = np.sqrt(6.0 / (s[-2] + s[-1]))
            out.append(rng.uniform(-bound, bound, size=s).astype(self.dtype))
        return out

    def set_params(self, params):
        if isinstance(params, np.ndarray) and params.ndim == 1:
            params = self.unflatten(params)
        params = [np.asarray(p, dtype=self.dtype) for p in params]
        if [p.shape for p in params] != [tuple(s) for s in self.shapes]:
            raise ValueError("parameter shapes do not match the architecture")
        self.params = params

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params])

    def unflatten(self, flat):
        flat = np.asarray(flat)
        if flat.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {flat.size}")
        out, pos = [], 0
        for s in self.shapes:
            size = int(np.prod(s))
            out.append(flat[pos : pos + size].reshape(s))
            pos += size
        return out

    def kernels(self, hierarchy):
        """Kernel parameters per block, scaled to the block's query level."""
        cfg = self.config
        out = []
        for b in range(cfg.num_levels):
            cell = hierarchy.cell_sizes[b]
            radius = cfg.radius_mult * cell
            out.append(
                KernelParams(
                    fibonacci_kernel_points(cfg.kernel_size, radius),
                    self.params[b],
                    radius,
                    cfg.sigma_mult * cell,
                )
            )
        return out

    def hierarchy(self, points):
        return build_hierarchy(points, self.config.base_cell, self.config.num_levels)

    def geometries(self, hierarchy):
        """Neighbor structures for every block; depends only on the points."""
        out = []
        for b, kernel in enumerate(self.kernels(hierarchy)):
            out.append(
                conv_geometry(
                    hierarchy.cloud(b - 1),
                    hierarchy.cloud(b),
                    kernel.kernel_points,
                    kernel.influence,
                    radius=kernel.radius,
                    dtype=self.dtype,
                )
            )
        return out

    def forward(self, hierarchy, feats, geometries=None):
        """Per-input-point descriptors and a cache for :meth:`backward`."""
        cfg = self.config
        if len(hierarchy) < cfg.num_levels:
            raise ValueError("hierarchy is shallower than the network")
        geometries = geometries or self.geometries(hierarchy)
        x = np.asarray(feats, dtype=self.dtype)
        if x.shape[1] != cfg.in_dim:
            raise ValueError(f"expected {cfg.in_dim} input channels, got {x.shape[1]}")
        cache = {"geometries": geometries, "blocks": [], "ups": []}
        skips = []
        for b in range(cfg.num_levels):
            pre, aggregated = kpconv_forward(geometries[b], x, self.params[b])
            x = leaky(pre, cfg.leaky_slope)
            cache["blocks"].append((pre, aggregated))
            skips.append(x)
        n_up = len(cfg.up_dims)
        for u in range(n_up):
            level = cfg.num_levels - 1 - u
            parents = hierarchy.levels[level].parent_indices
            stacked = np.concatenate([x[parents], skips[level - 1]], axis=1)
            pre = stacked @ self.params[cfg.num_levels + u]
            last = u == n_up - 1
            x = pre if last else leaky(pre, cfg.leaky_slope)
            cache["ups"].append((stacked, pre, parents))
        finest = cfg.num_levels - 1 - n_up
        x = x[hierarchy.source_to_level(finest)]
        cache["finest"] = finest
        cache["hierarchy"] = hierarchy
        return x, cache

    def backward(self, cache, upstream):
        """Gradients of all weight arrays given ``d loss / d output``."""
        cfg = self.config
        hierarchy = cache["hierarchy"]
        grads = [None] * len(self.params)
        finest = cache["finest"]
        n_level = len(hierarchy.levels[finest])
        g = _scatter_rows(hierarchy.source_to_level(finest), upstream, n_level, self.dtype)
        skip_grads = [None] * cfg.num_levels
        n_up = len(cfg.up_dims)
        for u in reversed(range(n_up)):
            stacked, pre, parents = cache["ups"][u]
            if u != n_up - 1:
                g = leaky_grad(pre, cfg.leaky_slope, g)
            w = self.params[cfg.num_levels + u]
            grads[cfg.num_levels + u] = stacked.T @ g
            g_stacked = g @ w.T
            level = cfg.num_levels - 1 - u
            d_coarse = g_stacked.shape[1] - cfg.block_dims[level - 1]
            skip_grads[level - 1] = g_stacked[:, d_coarse:]
            g = _scatter_rows(parents, g_stacked[:, :d_coarse], len(hierarchy.levels[level]), self.dtype)
        for b in reversed(range(cfg.num_levels)):
            if skip_grads[b] is not None:
                g = g + skip_grads[b] if g is not None else skip_grads[b]
            pre, aggregated = cache["blocks"][b]
            g = leaky_grad(pre, cfg.leaky_slope, g)
            g, grads[b] = kpconv_backward(cache["geometries"][b], aggregated, self.params[b], g)
        return grads

    def describe(self, points):
        """Descriptor field for a point set (no gradient bookkeeping kept)."""
        h = self.hierarchy(points)
        out, _ = self.forward(h, input_features(points, self.dtype))
        return DescriptorField(out.astype(np.float64), "learned")


def _scatter_rows(index, values, n, dtype):
    out = np.zeros((n, values.shape[1]), dtype=dtype)
    np.add.at(out, index, values)
    return out
