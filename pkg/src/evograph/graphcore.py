"""Connectivity matrices, longitudinal samples and per-node edge statistics.

Functions here accept either a :class:`ConnectivityMatrix` (or plain array),
returning numpy results, or a :class:`Tensor` of shape ``[n, n]`` or
``[B, n, n]``, returning differentiable tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import DimensionError, Tensor

DEFAULT_ROIS = 35
SIGMA_FLOOR = 1e-6


class DegenerateGraphError(ValueError):
    pass


class InvariantError(ValueError):
    pass


@dataclass(frozen=True)
class ConnectivityMatrix:
    """Weighted undirected graph: symmetric, zero diagonal, weights in [0, 1]."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"connectivity matrix must be square, got shape {list(w.shape)}")
        if not np.array_equal(w, w.T):
            raise InvariantError("connectivity matrix is not symmetric")
        if np.any(np.diag(w) != 0.0):
            raise InvariantError("connectivity matrix has a non-zero diagonal")
        if np.any(w < 0.0) or np.any(w > 1.0) or not np.all(np.isfinite(w)):
            raise InvariantError("connectivity matrix entries must lie in [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_r(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        return isinstance(other, ConnectivityMatrix) and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True)
class LongitudinalSample:
    subject_id: str
    graphs: tuple[ConnectivityMatrix, ...]

    def __post_init__(self):
        graphs = tuple(self.graphs)
        if len(graphs) < 2:
            raise InvariantError(f"subject {self.subject_id}: need at least 2 timepoints, got {len(graphs)}")
        sizes = {g.n_r for g in graphs}
        if len(sizes) != 1:
            raise InvariantError(f"subject {self.subject_id}: timepoints disagree on n_r {sorted(sizes)}")
        object.__setattr__(self, "graphs", graphs)

    @property
    def n_r(self) -> int:
        return self.graphs[0].n_r

    @property
    def timepoints(self) -> int:
        return len(self.graphs)


@dataclass(frozen=True)
class NodeWeightDistribution:
    mu: np.ndarray | Tensor
    sigma: np.ndarray | Tensor


def _weights(g) -> np.ndarray:
    return g.weights if isinstance(g, ConnectivityMatrix) else np.asarray(g, dtype=np.float64)


def _offdiag_mask(shape) -> np.ndarray:
    n = shape[-1]
    return np.broadcast_to(1.0 - np.eye(n), shape).copy()


def node_weight_stats(g, sigma_floor: float = SIGMA_FLOOR) -> NodeWeightDistribution:
    """Mean and population std of each node's n_r - 1 off-diagonal edge weights.

    Tensor input of shape ``[..., n, n]`` yields ``mu``/``sigma`` of shape
    ``[..., n, 1]``; the std is ``sqrt(max(var, floor**2))`` so its gradient
    stays finite on constant rows.
    """
    if isinstance(g, Tensor):
        n = g.shape[-1]
        if n < 2:
            raise DegenerateGraphError("node statistics need at least 2 nodes")
        off = Tensor(_offdiag_mask(g.shape))
        x = g * off
        mu = de.scalar_mul(x.sum(axis=-1), 1.0 / (n - 1))
        ones_row = Tensor(np.ones(g.shape[:-2] + (1, n)))
        centred = (x - de.matmul(mu, ones_row)) * off
        var = de.scalar_mul(de.square(centred).sum(axis=-1), 1.0 / (n - 1))
        sigma = de.sqrt(de.clamp(var, lo=sigma_floor**2))
        return NodeWeightDistribution(mu, sigma)

    w = _weights(g)
    n = w.shape[0]
    if n < 2:
        raise DegenerateGraphError("node statistics need at least 2 nodes")
    off = ~np.eye(n, dtype=bool)
    rows = w[off].reshape(n, n - 1)
    mu = rows.mean(axis=1)
    sigma = np.maximum(rows.std(axis=1), sigma_floor)
    return NodeWeightDistribution(mu, sigma)


def node_strength(g):
    """Row sums: each edge counts once in each endpoint's row."""
    if isinstance(g, Tensor):
        return g.sum(axis=-1)
    return _weights(g).sum(axis=1)


def symmetrize_clamp(raw):
    """``(raw + rawᵀ)/2`` with the diagonal zeroed and entries clipped to [0, 1].

    Tensor input stays differentiable (clip subgradient 1 inside, 0 outside)
    and may carry a leading batch axis; array input returns a
    :class:`ConnectivityMatrix`.
    """
    if isinstance(raw, Tensor):
        if raw.ndim < 2 or raw.shape[-1] != raw.shape[-2]:
            raise DimensionError(f"symmetrize_clamp needs square matrices, got shape {list(raw.shape)}")
        sym = de.scalar_mul(raw + de.transpose(raw), 0.5)
        return de.clamp(sym * Tensor(_offdiag_mask(raw.shape)), 0.0, 1.0)
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise DimensionError(f"symmetrize_clamp needs a square matrix, got shape {list(r.shape)}")
    out = np.clip((r + r.T) * 0.5, 0.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return ConnectivityMatrix(out)


def stack(graphs) -> np.ndarray:
    """Stack graphs into a ``[B, n, n]`` array."""
    return np.stack([_weights(g) for g in graphs])
