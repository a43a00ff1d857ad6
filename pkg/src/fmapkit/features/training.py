"""Siamese training of the extractor through the regularized map solver."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..fmap import (
    DEFAULT_K,
    DEFAULT_LAMBDA,
    FuncMap,
    SolveContext,
    gt_from_pointmap,
    solve_backward,
    solve_regularized,
    spectral_loss,
)
from ..mesh import axis_rotation
from ..spectral import mesh_basis, project
from .network import ExtractorConfig, ExtractorNet, input_features

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KPW1"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    k: int = DEFAULT_K
    lam: float = DEFAULT_LAMBDA
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    total_steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)


class Adam:
    """ADAM with bias correction over one flat parameter vector."""

    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return (params - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params.dtype)


def learning_rate(step, total_steps, lr_initial, lr_final):
    """Log-linear interpolation from ``lr_initial`` to ``lr_final``."""
    if total_steps <= 1:
        return lr_initial
    frac = min(step / (total_steps - 1), 1.0)
    if lr_initial <= 0 or lr_final <= 0:
        return lr_initial + frac * (lr_final - lr_initial)
    return float(np.exp(np.log(lr_initial) + frac * (np.log(lr_final) - np.log(lr_initial))))


@dataclass
class TrainState:
    params: np.ndarray
    adam: Adam
    step: int
    config: TrainConfig

    @classmethod
    def initial(cls, config):
        net = ExtractorNet(config.extractor, seed=config.seed)
        flat = net.flat_params()
        return cls(flat, Adam(flat.size, dtype=flat.dtype), 0, config)

    def network(self):
        return ExtractorNet(self.config.extractor, params=self.params)

    @property
    def lr(self):
        c = self.config
        return learning_rate(self.step, c.total_steps, c.lr_initial, c.lr_final)


@dataclass(frozen=True, eq=False)
class TrainShape:
    """A shape ready for training: vertices, up axis, truncated basis."""

    vertices: np.ndarray
    up_axis: str
    basis: object


@dataclass(frozen=True, eq=False)
class TrainPair:
    source: TrainShape
    target: TrainShape
    gt: FuncMap  # (k_N, k_M)

    @classmethod
    def from_meshes(cls, mesh_m, mesh_n, k, t=None, bases=None):
        """Pair with GT from a vertex map ``t: N -> M`` (identity by default)."""
        bm, bn = bases or (mesh_basis(mesh_m, k), mesh_basis(mesh_n, k))
        bm, bn = bm.truncate(k), bn.truncate(k)
        t = np.arange(mesh_n.n_vertices) if t is None else t
        return cls(
            TrainShape(mesh_m.vertices, mesh_m.up_axis, bm),
            TrainShape(mesh_n.vertices, mesh_n.up_axis, bn),
            gt_from_pointmap(bm, bn, t),
        )


def augment_rotation(mesh, rng=None, angle=None):
    """Rotate about the up axis through the centroid by a random angle.

    Masses are carried over unchanged since rotation preserves areas.
    """
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    c = mesh.centroid
    v = (mesh.vertices - c) @ axis_rotation(angle, mesh.up_axis).T + c
    return type(mesh)(v, mesh.faces, mesh.vertex_masses, mesh.up_axis)


def _rotate_points(points, up_axis, angle):
    c = points.mean(axis=0)
    return (points - c) @ axis_rotation(angle, up_axis).T + c


def shape_features(net, vertices):
    """Forward pass on one shape; returns (float64 descriptors, cache)."""
    h = net.hierarchy(vertices)
    out, cache = net.forward(h, input_features(vertices, net.dtype))
    return out.astype(np.float64), cache


def pair_loss_and_grads(net, pair, lam, rng=None, augment=False):
    """Loss of one pair and the gradient w.r.t. every network weight array.

    The same network is applied to both shapes; gradients from the two
    branches are summed.
    """
    shapes = (pair.source, pair.target)
    feats, caches = [], []
    for shape in shapes:
        v = shape.vertices
        if augment:
            v = _rotate_points(v, shape.up_axis, rng.uniform(0.0, 2 * np.pi))
        f, cache = shape_features(net, v)
        if not np.isfinite(f).all():
            raise NonFiniteLossError("network produced non-finite descriptors")
        feats.append(f)
        caches.append(cache)
    bm, bn = pair.source.basis, pair.target.basis
    ctx = SolveContext(project(bm, feats[0]), project(bn, feats[1]), bm.evals, bn.evals, lam)
    c = solve_regularized(ctx)
    loss, d_c = spectral_loss(c, pair.gt)
    d_a, d_b = solve_backward(ctx, c, d_c)
    grads = None
    for basis, d_coef, cache in zip((bm, bn), (d_a, d_b), caches):
        d_feat = (basis.mass[:, None] * (basis.phi @ d_coef)).astype(net.dtype)
        g = net.backward(cache, d_feat)
        grads = g if grads is None else [x + y for x, y in zip(grads, g)]
    return loss, grads


def train_step(state, batch):
    """One ADAM update on the mean loss of a batch of pairs.

    Returns the new state and the mean batch loss. Pair gradients are summed
    in batch order so results do not depend on scheduling.
    """
    cfg = state.config
    net = state.network()
    rng = np.random.default_rng([cfg.seed, state.step])
    total_loss, total_grad = 0.0, None
    for pair in batch:
        try:
            loss, grads = pair_loss_and_grads(net, pair, cfg.lam, rng, cfg.augment)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"{exc} at step {state.step}") from exc
        flat = np.concatenate([g.ravel() for g in grads])
        total_loss += loss
        total_grad = flat if total_grad is None else total_grad + flat
    loss = total_loss / len(batch)
    if not np.isfinite(loss) or not np.isfinite(total_grad).all():
        raise NonFiniteLossError(f"non-finite loss {loss} at step {state.step}")
    grad = (total_grad / len(batch)).astype(state.params.dtype)
    params = state.adam.step(state.params, grad, state.lr)
    return TrainState(params, state.adam, state.step + 1, cfg), loss


def epoch_batches(n_pairs, batch_size, rng):
    """Shuffled index batches covering every pair once (last may be short)."""
    order = rng.permutation(n_pairs)
    return [order[i : i + batch_size] for i in range(0, n_pairs, batch_size)]


def train(state, pairs, steps, callback=None):
    """Run ``steps`` updates over shuffled epochs; returns (state, losses, epochs).

    ``epochs[i]`` is the epoch index of step ``i``. Shuffling is seeded by
    (seed, epoch) so resuming mid-run reproduces the same batch order.
    """
    cfg = state.config
    losses, epochs = [], []
    per_epoch = -(-len(pairs) // cfg.batch_size)
    for _ in range(steps):
        epoch, slot = divmod(state.step, per_epoch)
        order = epoch_batches(len(pairs), cfg.batch_size, np.random.default_rng([cfg.seed, 7919, epoch]))
        batch = [pairs[i] for i in order[slot]]
        state, loss = train_step(state, batch)
        losses.append(loss)
        epochs.append(epoch)
        if callback is not None:
            callback(state, loss)
    return state, np.array(losses), np.array(epochs)


def save_checkpoint(state, path):
    """``KPW1`` | config digest | u32 count | f32 params | f32 m | f32 v | u64 step."""
    digest = state.config.extractor.digest()
    n = state.params.size
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(digest)
        fh.write(struct.pack("<I", n))
        for arr in (state.params, state.adam.m, state.adam.v):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", state.step))


def load_checkpoint(path, config):
    """Restore a state; the extractor config must match the stored digest."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a KPW1 checkpoint")
    digest = data[4:36]
    if digest != config.extractor.digest():
        raise ValueError(f"{path}: checkpoint was written for a different extractor config")
    (n,) = struct.unpack_from("<I", data, 36)
    if len(data) != 40 + 12 * n + 8:
        raise ValueError(f"{path}: truncated checkpoint")
    arrays = [np.frombuffer(data, "<f4", n, 40 + 4 * n * i) for i in range(3)]
    (step,) = struct.unpack_from("<Q", data, 40 + 12 * n)
    dtype = np.dtype(config.extractor.dtype)
    adam = Adam(n, dtype=dtype)
    adam.m, adam.v, adam.t = arrays[1].astype(dtype), arrays[2].astype(dtype), int(step)
    return TrainState(arrays[0].astype(dtype), adam, int(step), config)

