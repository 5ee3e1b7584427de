"""Dense numerics: hand-differentiated MLPs, Jacobi SVD pseudo-inverse, Adam.

Matrices are plain ``numpy.ndarray`` objects. MLP weights are stored
``(out, in)`` so a layer computes ``y = W x + b``; batched inputs are rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DegenerateMatrixError, NumericError

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    # expressed through the post-activation value so the cache holds one array per layer
    if name == "relu":
        return da * (a > 0)
    if name == "tanh":
        return da * (1 - a * a)
    return da


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("MLP needs one bias per weight and at least one layer")
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {li}: weight {w.shape} / bias {b.shape} mismatch")
            if li and w.shape[1] != self.weights[li - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {li} expects {w.shape[1]} inputs, previous layer gives "
                    f"{self.weights[li - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases], self.activation
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases], self.activation
        )


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    dtype=np.float64,
    activation: str = "relu",
    out_scale: float = 1.0,
) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``out_scale`` multiplies the last layer."""
    if len(sizes) < 2:
        raise ConfigurationError("an MLP needs at least input and output widths")
    weights, biases = [], []
    for li, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        if li == len(sizes) - 2:
            w = w * out_scale
        weights.append(w.astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return MlpParams(weights, biases, activation)


@dataclass
class MlpCache:
    """Per-layer inputs recorded by :func:`mlp_forward`."""

    params_id: int
    layer_inputs: list[np.ndarray]
    output_shape: tuple
    squeeze: bool

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.layer_inputs)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=params.dtype)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ConfigurationError(f"MLP expects input width {params.in_dim}, got shape {x.shape}")
    inputs = []
    last = len(params.weights) - 1
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w.T + b
        if li < last:
            h = _act(params.activation, h)
    y = h[0] if squeeze else h
    return y, MlpCache(id(params), inputs, y.shape, squeeze)


def mlp_backward(
    params: MlpParams, cache: MlpCache, dy: np.ndarray
) -> tuple[np.ndarray, MlpParams]:
    """Reverse-accumulate gradients of ``sum(y * dy)``.

    Returns the input gradient and an :class:`MlpParams` holding parameter
    gradients in the same layout as ``params``.
    """
    if cache.params_id != id(params) or len(cache.layer_inputs) != len(params.weights):
        raise ContractError("MLP cache was produced by a different parameter set")
    dy = np.asarray(dy, dtype=params.dtype)
    if dy.shape != cache.output_shape:
        raise ContractError(f"upstream gradient shape {dy.shape} != cached output {cache.output_shape}")
    g = dy[None, :] if cache.squeeze else dy
    dws: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for li in range(len(params.weights) - 1, -1, -1):
        h_in = cache.layer_inputs[li]
        if h_in.shape[1] != params.weights[li].shape[1]:
            raise ContractError("MLP cache does not match current layer shapes")
        dws[li] = g.T @ h_in
        dbs[li] = g.sum(axis=0)
        g = g @ params.weights[li]
        if li > 0:
            g = _act_grad(params.activation, h_in, g)
    dx = g[0] if cache.squeeze else g
    return dx, MlpParams(dws, dbs, params.activation)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle-method pairings: every column pair meets once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = [players[i] for i in range(m // 2)]
        q = [players[m - 1 - i] for i in range(m // 2)]
        pairs = [(a, b) for a, b in zip(p, q) if a < n and b < n]
        if pairs:
            rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd_jacobi(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 80):
    """Thin SVD ``a = U diag(s) V^T`` by one-sided (Hestenes) Jacobi rotations.

    ``a`` must have at least as many rows as columns. Singular values come
    back in descending order. Column pairs are rotated in parallel rounds,
    so the arithmetic order is fixed and results are reproducible.
    """
    a = np.array(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        raise ConfigurationError("svd_jacobi needs rows >= cols; transpose first")
    u = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            c = np.ones_like(gamma)
            s = np.zeros_like(gamma)
            g = gamma[active]
            zeta = (beta[active] - alpha[active]) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c[active] = 1.0 / np.sqrt(1.0 + t * t)
            s[active] = c[active] * t
            u[:, p], u[:, q] = c * up - s * uq, s * up + c * uq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    sig = np.sqrt(np.einsum("ij,ij->j", u, u))
    order = np.argsort(-sig, kind="stable")
    sig, u, v = sig[order], u[:, order], v[:, order]
    nz = sig > 0
    u[:, nz] = u[:, nz] / sig[nz]
    return u, sig, v


def pseudo_inverse_with_spectrum(w: np.ndarray, sigma_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`pseudo_inverse` but also returns the singular values (descending)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ConfigurationError("pseudo_inverse expects a matrix")
    if not np.all(np.isfinite(w)):
        raise NumericError("pseudo_inverse: matrix has non-finite entries")
    if sigma_tol < 0:
        raise ConfigurationError("sigma_tol must be >= 0")
    transposed = w.shape[0] < w.shape[1]
    u, s, v = svd_jacobi(w.T if transposed else w)
    if s.size == 0 or s[0] == 0:
        raise DegenerateMatrixError("pseudo_inverse: matrix has effective rank 0")
    keep = s > sigma_tol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    pinv = (v * inv_s) @ u.T
    return (pinv.T if transposed else pinv), s


def pseudo_inverse(w: np.ndarray, sigma_tol: float = 1e-8) -> np.ndarray:
    """Moore-Penrose pseudo-inverse ``V diag(1/s) U^T`` in double precision.

    Singular values below ``sigma_tol * s_max`` are treated as zero.
    """
    return pseudo_inverse_with_spectrum(w, sigma_tol)[0]


def singular_values(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return svd_jacobi(w.T if w.shape[0] < w.shape[1] else w)[1]


@dataclass
class AdamState:
    lr0: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.step < 0 or self.total_steps < 0:
            raise ConfigurationError("step counts must be non-negative")


def cosine_lr(lr0: float, pos: int, total_steps: int) -> float:
    if total_steps <= 0:
        return lr0
    frac = min(max(pos, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], schedule_pos: int
) -> float:
    """Bias-corrected Adam update applied in place; returns the learning rate used."""
    if len(params) != len(grads):
        raise ConfigurationError("params and grads lists differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or m.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not mirror parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_step: non-finite gradient")
    state.step += 1
    lr = cosine_lr(state.lr0, schedule_pos, state.total_steps)
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if lr == 0.0:
            continue
        denom = np.sqrt(v / bc2) + state.eps
        p -= (lr * (m / bc1) / denom).astype(p.dtype)
    return lr
