"""Invertible linear projection codec, the MLP codec used for ablations, and the edge encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, DegenerateMatrixError
from .numerics import MlpCache, MlpParams, init_mlp, mlp_backward, mlp_forward, pseudo_inverse_with_spectrum

SIGMA_TOL = 1e-8
RANK_GUARD = 1e-6


@dataclass
class IlpParams:
    """Affine encoder ``n = W chi + B`` with decoder ``chi = W^+ (n - B)``.

    ``W_pinv`` is a float64 cache of the pseudo-inverse; ``stale`` is set
    whenever ``W`` may have changed since the last :func:`refresh_pinv`.
    """

    W: np.ndarray
    B: np.ndarray
    W_pinv: np.ndarray | None = None
    stale: bool = True
    sigma: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        d, c = self.W.shape
        if d <= c:
            raise ConfigurationError(f"latent width {d} must exceed physical width {c}")
        if self.B.shape != (d,):
            raise ConfigurationError("bias must have one entry per latent channel")

    @property
    def latent_dim(self) -> int:
        return self.W.shape[0]

    @property
    def phys_dim(self) -> int:
        return self.W.shape[1]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "B": self.B}

    def mark_stale(self) -> None:
        self.stale = True

    def refresh(self) -> "IlpParams":
        return refresh_pinv(self)

    def encode(self, chi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return encode(self, chi), chi

    def encode_backward(self, chi: np.ndarray, dn: np.ndarray) -> dict[str, np.ndarray]:
        dn2 = np.atleast_2d(dn)
        return {"W": (dn2.T @ np.atleast_2d(chi).astype(dn2.dtype)).astype(self.W.dtype), "B": dn2.sum(axis=0).astype(self.B.dtype)}

    def encode_input_grad(self, chi: np.ndarray, dn: np.ndarray) -> np.ndarray:
        return (np.asarray(dn, np.float64) @ self.W.astype(np.float64)).astype(self.W.dtype)

    def decode(self, n: np.ndarray) -> tuple[np.ndarray, None]:
        return decode(self, n), None

    def decode_backward(self, cache, dchi: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        # W_pinv is a fixed linear map within one optimisation step
        dn = (np.atleast_2d(dchi).astype(np.float64) @ self.W_pinv).astype(self.W.dtype)
        grads = {"W": np.zeros_like(self.W), "B": -dn.sum(axis=0).astype(self.B.dtype)}
        return dn.reshape(np.shape(dchi)[:-1] + (self.latent_dim,)), grads

    def copy(self) -> "IlpParams":
        return IlpParams(
            self.W.copy(),
            self.B.copy(),
            None if self.W_pinv is None else self.W_pinv.copy(),
            self.stale,
            None if self.sigma is None else self.sigma.copy(),
        )


def init_ilp(phys_dim: int, latent_dim: int, rng: np.random.Generator, dtype=np.float64) -> IlpParams:
    """Gaussian ``W`` with scale ``1/sqrt(C)``, zero ``B``, pseudo-inverse already computed."""
    w = rng.normal(0.0, 1.0 / np.sqrt(phys_dim), size=(latent_dim, phys_dim)).astype(dtype)
    return refresh_pinv(IlpParams(w, np.zeros(latent_dim, dtype=dtype)))


def padding_ilp(phys_dim: int, latent_dim: int, dtype=np.float64) -> IlpParams:
    """``W = [I; 0]``, ``B = 0``: encode pads with zeros, decode truncates."""
    w = np.zeros((latent_dim, phys_dim), dtype=dtype)
    w[:phys_dim, :phys_dim] = np.eye(phys_dim, dtype=dtype)
    return refresh_pinv(IlpParams(w, np.zeros(latent_dim, dtype=dtype)))


def encode(ilp: IlpParams, chi: np.ndarray) -> np.ndarray:
    chi = np.asarray(chi, dtype=ilp.W.dtype)
    return chi @ ilp.W.T + ilp.B


def decode(ilp: IlpParams, n: np.ndarray) -> np.ndarray:
    """Least-squares preimage of ``n`` under the encoder."""
    if ilp.stale or ilp.W_pinv is None:
        raise ContractError("decode called with a stale pseudo-inverse; call refresh_pinv first")
    n = np.asarray(n)
    out = (n.astype(np.float64) - ilp.B.astype(np.float64)) @ ilp.W_pinv.T
    return out.astype(ilp.W.dtype)


def refresh_pinv(ilp: IlpParams) -> IlpParams:
    """Recompute the cached pseudo-inverse in place (returns ``ilp`` for chaining)."""
    pinv, sigma = pseudo_inverse_with_spectrum(ilp.W, SIGMA_TOL)
    if sigma[-1] <= RANK_GUARD * sigma[0]:
        raise DegenerateMatrixError(
            f"projection lost full column rank: sigma_min/sigma_max = {sigma[-1] / sigma[0]:.3e}"
        )
    ilp.W_pinv = pinv
    ilp.sigma = sigma
    ilp.stale = False
    return ilp


@dataclass
class MlpCodec:
    """Non-invertible encoder/decoder pair (ablation arm); decode is only approximate."""

    enc: MlpParams
    dec: MlpParams
    stale: bool = False

    @property
    def latent_dim(self) -> int:
        return self.enc.out_dim

    @property
    def phys_dim(self) -> int:
        return self.enc.in_dim

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("enc", self.enc), ("dec", self.dec)):
            for li, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{prefix}.w{li}"] = w
                out[f"{prefix}.b{li}"] = b
        return out

    def mark_stale(self) -> None:
        pass

    def refresh(self) -> "MlpCodec":
        return self

    def encode(self, chi):
        return mlp_forward(self.enc, chi)

    def encode_backward(self, cache: MlpCache, dn) -> dict[str, np.ndarray]:
        _, g = mlp_backward(self.enc, cache, dn)
        return _mlp_grads("enc", g) | {k: np.zeros_like(v) for k, v in _mlp_grads("dec", self.dec).items()}

    def encode_input_grad(self, cache: MlpCache, dn) -> np.ndarray:
        return mlp_backward(self.enc, cache, dn)[0]

    def decode(self, n):
        return mlp_forward(self.dec, n)

    def decode_backward(self, cache: MlpCache, dchi):
        dn, g = mlp_backward(self.dec, cache, dchi)
        return dn, {k: np.zeros_like(v) for k, v in _mlp_grads("enc", self.enc).items()} | _mlp_grads("dec", g)

    def copy(self) -> "MlpCodec":
        return MlpCodec(self.enc.copy(), self.dec.copy())


def _mlp_grads(prefix: str, g: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for li, (w, b) in enumerate(zip(g.weights, g.biases)):
        out[f"{prefix}.w{li}"] = w
        out[f"{prefix}.b{li}"] = b
    return out


def init_mlp_codec(phys_dim: int, latent_dim: int, hidden: int, rng, dtype=np.float64) -> MlpCodec:
    return MlpCodec(
        init_mlp([phys_dim, hidden, latent_dim], rng, dtype),
        init_mlp([latent_dim, hidden, phys_dim], rng, dtype),
    )


def init_edge_encoder(
    geom_dim: int, latent_dim: int, hidden: int, n_hidden: int, rng, dtype=np.float64
) -> MlpParams:
    if latent_dim % 2:
        raise ConfigurationError("edge latent width must be even")
    return init_mlp([geom_dim] + [hidden] * n_hidden + [latent_dim], rng, dtype)


def encode_edges(params: MlpParams, edge_geom: np.ndarray) -> tuple[np.ndarray, np.ndarray, MlpCache]:
    """Per-edge latents split into ``(e1, e2)`` halves, plus the MLP cache for backprop."""
    if params.out_dim % 2:
        raise ConfigurationError("edge latent width must be even")
    lat, cache = mlp_forward(params, edge_geom)
    half = params.out_dim // 2
    return lat[:, :half], lat[:, half:], cache
