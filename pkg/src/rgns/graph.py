"""Fixed-radius neighbour graphs (uniform cell list) and node/edge feature assembly."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, NumericError
from .particles import StepState


@dataclass(eq=False)
class RadiusGraph:
    """Directed edges ``(receiver, sender)`` sorted lexicographically, both directions stored."""

    n_nodes: int
    receivers: np.ndarray
    senders: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.receivers)

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.receivers, self.senders], axis=1)

    @cached_property
    def receive_matrix(self) -> sp.csr_matrix:
        """``(N, E)`` 0/1 matrix; ``receive_matrix @ m`` sums messages per receiver in edge order."""
        return sp.csr_matrix(
            (np.ones(self.n_edges), (self.receivers, np.arange(self.n_edges))), shape=(self.n_nodes, self.n_edges)
        )

    @cached_property
    def send_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.ones(self.n_edges), (self.senders, np.arange(self.n_edges))), shape=(self.n_nodes, self.n_edges)
        )

    def aggregate(self, messages: np.ndarray) -> np.ndarray:
        out = self.receive_matrix @ messages
        return np.asarray(out, dtype=messages.dtype)

    def scatter_to_senders(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.send_matrix @ values, dtype=values.dtype)


def _within(diff: np.ndarray, r: float) -> np.ndarray:
    return np.sum(diff * diff, axis=1) <= r * r


def build_radius_graph(positions: np.ndarray, r: float, box=None) -> RadiusGraph:
    """All ordered pairs ``i != j`` with ``|p_i - p_j| <= r``, found through cells of side ``r``."""
    pos = np.asarray(positions, dtype=np.float64)
    if r <= 0:
        raise ConfigurationError("connectivity radius must be positive")
    if not np.all(np.isfinite(pos)):
        raise NumericError("build_radius_graph: non-finite positions")
    n, d = pos.shape
    if n == 0:
        return RadiusGraph(0, np.zeros(0, np.int64), np.zeros(0, np.int64))
    origin = pos.min(axis=0)
    if box is not None:
        origin = np.minimum(origin, np.asarray(box[0], dtype=np.float64))
    cell = np.floor((pos - origin) / r).astype(np.int64)
    # pad by one cell so every stencil neighbour has a valid linear key
    cell += 1
    shape = cell.max(axis=0) + 2
    strides = np.cumprod(np.concatenate([[1], shape[:-1]]))
    key = cell @ strides
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    recv_parts, send_parts = [], []
    for off in itertools.product((-1, 0, 1), repeat=d):
        nkey = key + np.asarray(off) @ strides
        start = np.searchsorted(sorted_key, nkey, side="left")
        stop = np.searchsorted(sorted_key, nkey, side="right")
        counts = stop - start
        total = counts.sum()
        if total == 0:
            continue
        recv = np.repeat(np.arange(n), counts)
        first = np.repeat(start - np.cumsum(counts) + counts, counts)
        send = order[first + np.arange(total)]
        keep = recv != send
        recv, send = recv[keep], send[keep]
        keep = _within(pos[recv] - pos[send], r)
        recv_parts.append(recv[keep])
        send_parts.append(send[keep])
    if recv_parts:
        recv = np.concatenate(recv_parts)
        send = np.concatenate(send_parts)
    else:
        recv = send = np.zeros(0, np.int64)
    idx = np.lexsort((send, recv))
    return RadiusGraph(n, recv[idx].astype(np.int64), send[idx].astype(np.int64))


def brute_force_edges(positions: np.ndarray, r: float) -> np.ndarray:
    """O(N^2) reference edge list, sorted like :func:`build_radius_graph`."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    keep = (i != j) & _within(pos[i] - pos[j], r)
    return np.stack([i[keep], j[keep]], axis=1)


def edge_features(graph: RadiusGraph, positions: np.ndarray, r: float) -> np.ndarray:
    """Per-edge ``((p_i - p_j) / r, |p_i - p_j| / r)``."""
    pos = np.asarray(positions, dtype=np.float64)
    disp = (pos[graph.receivers] - pos[graph.senders]) / r
    dist = np.linalg.norm(disp, axis=1, keepdims=True)
    return np.concatenate([disp, dist], axis=1)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ConfigurationError("normalizer statistics must be finite")
        if np.any(self.std <= 0):
            raise ConfigurationError("normalizer std must be positive")

    @classmethod
    def fit(cls, velocities) -> "Normalizer":
        """Per-axis statistics over any iterable of ``(..., D)`` velocity arrays."""
        flat = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1, np.shape(v)[-1]) for v in velocities])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dims: int) -> "Normalizer":
        return cls(np.zeros(dims), np.ones(dims))

    def normalize(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean) / self.std

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return v * self.std + self.mean


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the node physical vector: velocity slots, wall distances, material one-hot."""

    k: int
    dims: int
    n_materials: int = 1
    walls: bool = True

    @property
    def n_walls(self) -> int:
        return 2 * self.dims if self.walls else 0

    @property
    def width(self) -> int:
        return self.k * self.dims + self.n_walls + self.n_materials

    def slot(self, s: int) -> slice:
        s = s % self.k
        return slice(s * self.dims, (s + 1) * self.dims)

    @property
    def velocities(self) -> slice:
        return slice(0, self.k * self.dims)

    @property
    def static(self) -> slice:
        return slice(self.k * self.dims, self.width)


def wall_features(positions: np.ndarray, box_lo, box_hi, r: float) -> np.ndarray:
    """Distance to each of the ``2D`` walls, clipped to ``[0, r]`` and divided by ``r``."""
    pos = np.asarray(positions, dtype=np.float64)
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    lower = np.clip(pos - lo, 0.0, r) / r
    upper = np.clip(hi - pos, 0.0, r) / r
    return np.stack([lower, upper], axis=2).reshape(len(pos), -1)


def assemble_node_features(
    vel_window: np.ndarray,
    positions: np.ndarray,
    materials: np.ndarray,
    box,
    r: float,
    stats: Normalizer,
    n_materials: int = 1,
    walls: bool = True,
) -> np.ndarray:
    k, n, d = vel_window.shape
    if np.any(np.asarray(materials) >= n_materials):
        raise ConfigurationError(f"material code out of range for {n_materials} material types")
    vel = stats.normalize(vel_window).transpose(1, 0, 2).reshape(n, k * d)
    onehot = np.zeros((n, n_materials))
    onehot[np.arange(n), np.asarray(materials, dtype=np.int64)] = 1.0
    parts = [vel, wall_features(positions, box[0], box[1], r)] if walls else [vel]
    return np.concatenate(parts + [onehot], axis=1)


def node_physical(
    state: StepState, box, r: float, stats: Normalizer, n_materials: int = 1, walls: bool = True
) -> np.ndarray:
    """``(N, C)`` node vectors for ``state``; see :class:`FeatureLayout` for the columns."""
    return assemble_node_features(state.vel_window, state.positions, state.materials, box, r, stats, n_materials, walls)


def window_from_features(chi: np.ndarray, layout: FeatureLayout, stats: Normalizer) -> np.ndarray:
    """Inverse of the velocity block of :func:`assemble_node_features`: ``(k, N, D)`` un-normalized."""
    n = chi.shape[0]
    vel = chi[:, layout.velocities].reshape(n, layout.k, layout.dims).transpose(1, 0, 2)
    return stats.denormalize(vel)
