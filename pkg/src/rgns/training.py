"""Supervision windows, the bidirectional loss, the optimisation loop and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, NumericError, TruncatedFileError
from .graph import Normalizer, assemble_node_features
from .ilp import IlpParams, encode_edges
from .numerics import AdamState, adam_step, mlp_backward
from .particles import Trajectory, compute_velocities
from .rrmp import EdgeHalves, LatentNodes, stack_apply, stack_backward
from .simulator import ModelConfig, ModelParams, conditioning, init_model

log = logging.getLogger(__name__)

LOSS_MODES = ("bidirectional", "forward-only")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr0: float = 1e-4
    total_steps: int = 20000
    batch_size: int = 2
    noise_std: float = 1e-3
    loss_mode: str = "bidirectional"
    inverse_weight: float = 1.0
    latent_weight: float = 0.0
    window_weight: float = 0.0
    cycle_weight: float = 0.0
    backprop: str = "recompute"
    eval_every: int = 100
    patience: int = 10
    n_val_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
        if self.noise_std < 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ConfigurationError("noise_std >= 0, batch_size >= 1 and total_steps >= 0 required")
        if min(self.latent_weight, self.window_weight, self.cycle_weight) < 0:
            raise ConfigurationError("consistency weights must be >= 0")

    @property
    def terms(self) -> "ConsistencyTerms":
        return ConsistencyTerms(self.latent_weight, self.window_weight, self.cycle_weight)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def model_config_for(traj: Trajectory, **overrides) -> ModelConfig:
    """A :class:`ModelConfig` matching a trajectory's geometry and timestep."""
    base = dict(
        dims=traj.dims,
        radius=traj.radius,
        dt=traj.dt,
        box_lo=tuple(traj.box_lo),
        box_hi=tuple(traj.box_hi),
        n_materials=max(1, int(traj.materials.max()) + 1),
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Sample:
    """One supervision pair; velocity arrays are raw (un-normalized)."""

    traj_index: int
    t: int
    positions: np.ndarray  # p^t
    velocities: np.ndarray  # v^{t-k+1} .. v^{t+1}, shape (k+1, N, D)
    materials: np.ndarray

    @property
    def window_t(self) -> np.ndarray:
        return self.velocities[:-1]

    @property
    def window_next(self) -> np.ndarray:
        return self.velocities[1:]

    @property
    def target_next(self) -> np.ndarray:
        return self.velocities[-1]

    @property
    def target_old(self) -> np.ndarray:
        return self.velocities[0]


def make_windows(trajectories: Sequence[Trajectory], k: int) -> list[Sample]:
    """All samples in (trajectory, time) order; each needs ``v^{t-k+1} .. v^{t+1}``."""
    out = []
    for ti, traj in enumerate(trajectories):
        if traj.n_steps < k + 2:
            warnings.warn(f"trajectory {ti} has {traj.n_steps} frames (< k+2 = {k + 2}); skipped", stacklevel=2)
            continue
        vel = compute_velocities(traj)
        for t in range(k, traj.n_steps - 1):
            out.append(
                Sample(ti, t, traj.positions[t].astype(np.float64), vel[t - k : t + 1], traj.materials)
            )
    return out


def _zero_grads(model: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in model.named_arrays().items()}


def _accumulate(total: dict, prefix: str, grads: dict) -> None:
    for name, g in grads.items():
        total[f"{prefix}{name}"] += g


def _mlp_named(net_grads) -> dict[str, np.ndarray]:
    out = {}
    for li, (w, b) in enumerate(zip(net_grads.weights, net_grads.biases)):
        out[f"w{li}"] = w
        out[f"b{li}"] = b
    return out


@dataclass(frozen=True)
class ConsistencyTerms:
    """Optional loss terms that tie the two directions together (all off by default).

    ``latent``: stack output vs the encoding of the opposite direction's
    input, divided by the mean squared singular value of ``W`` for the ILP
    codec so that shrinking the codec cannot shrink the term.
    ``window``: decoded columns other than the predicted slot vs that same
    input (the shifted known velocities and the static features).
    ``cycle``: the predicted slot is written into the opposite direction's
    input, the opposite pass is run, and the slot it predicts is compared
    with the original input; this is one step of the consistency round trip.
    """

    latent: float = 0.0
    window: float = 0.0
    cycle: float = 0.0

    def __post_init__(self):
        if min(self.latent, self.window, self.cycle) < 0:
            raise ConfigurationError("consistency weights must be >= 0")

    @property
    def active(self) -> bool:
        return self.latent > 0 or self.window > 0 or self.cycle > 0


NO_TERMS = ConsistencyTerms()
OPPOSITE = {"forward": "inverse", "inverse": "forward"}


def _latent_scale(model: ModelParams) -> float:
    if isinstance(model.codec, IlpParams):
        w = model.codec.W.astype(np.float64)
        return float(np.sum(w * w)) / w.shape[1]
    return 1.0


def _stack_grads(model, grads, y, dy, graph, edges, direction, backprop, x):
    """Backprop one stack pass into ``grads``; returns the input node and edge gradients."""
    sg = stack_backward(model.stack, y, LatentNodes.split(dy), graph, edges, direction=direction, mode=backprop, input_nodes=x)
    for li, layer_g in enumerate(sg.layers):
        for name, net_g in layer_g.items():
            _accumulate(grads, f"stack.{li}.{name}.", _mlp_named(net_g))
    return sg.nodes.join(), np.concatenate([sg.edges.e1, sg.edges.e2], axis=1)


def direction_loss(
    model: ModelParams,
    sample: Sample,
    direction: str,
    noise: np.ndarray | None,
    grads: dict[str, np.ndarray] | None,
    weight: float = 1.0,
    backprop: str = "recompute",
    terms: ConsistencyTerms = NO_TERMS,
    other_noise: np.ndarray | None = None,
) -> float:
    """MSE of the predicted slot against clean ground truth, in normalized units.

    ``terms`` adds the :class:`ConsistencyTerms`; ``other_noise`` is the
    opposite direction's input noise, so that their targets are exactly the
    input the opposite direction sees. When ``grads`` is given,
    ``weight * dLoss/dparam`` is added into it.
    """
    cfg = model.config
    lay = cfg.layout
    dt = cfg.dtype
    if direction == "forward":
        window, slot, other_slot, target, window_out = (
            sample.window_t, lay.slot(-1), lay.slot(0), sample.target_next, sample.window_next
        )
    else:
        window, slot, other_slot, target, window_out = (
            sample.window_next, lay.slot(0), lay.slot(-1), sample.target_old, sample.window_t
        )
    graph, geom = conditioning(model, sample.positions)
    e1, e2, edge_cache = encode_edges(model.edge_enc, geom)
    edges = EdgeHalves(e1, e2)

    def features(w):
        return assemble_node_features(
            w, sample.positions, sample.materials, cfg.box, cfg.radius, model.normalizer, cfg.n_materials, cfg.walls
        )

    chi = features(window)
    if noise is not None:
        chi[:, lay.velocities] += noise
    n, enc_cache = model.codec.encode(chi.astype(dt))
    x = LatentNodes.split(n)
    y = stack_apply(model.stack, x, graph, edges, direction)
    chi_out, dec_cache = model.codec.decode(y.join())
    err = chi_out[:, slot].astype(np.float64) - model.normalizer.normalize(target)
    loss = float(np.mean(err * err))

    if terms.active:
        chi_other = features(window_out)
        if other_noise is not None:
            chi_other[:, lay.velocities] += other_noise
    if terms.window > 0:
        known = np.ones(lay.width, dtype=bool)
        known[slot] = False
        win_err = chi_out[:, known].astype(np.float64) - chi_other[:, known]
        loss += terms.window * float(np.mean(win_err * win_err))
    if terms.latent > 0:
        n_other, other_cache = model.codec.encode(chi_other.astype(dt))
        lat_err = y.join().astype(np.float64) - n_other
        lat_scale = _latent_scale(model)
        lat_mse = float(np.mean(lat_err * lat_err))
        loss += terms.latent * lat_mse / lat_scale
    if terms.cycle > 0:
        # what the opposite step would see: its known input with our prediction in the new slot
        chi_c = chi_other.copy()
        chi_c[:, slot] = chi_out[:, slot]
        n_c, c_cache = model.codec.encode(chi_c.astype(dt))
        x_c = LatentNodes.split(n_c)
        z = stack_apply(model.stack, x_c, graph, edges, OPPOSITE[direction])
        chi_z, z_cache = model.codec.decode(z.join())
        cyc_err = chi_z[:, other_slot].astype(np.float64) - chi[:, other_slot]
        loss += terms.cycle * float(np.mean(cyc_err * cyc_err))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite {direction} loss for sample (trajectory {sample.traj_index}, t={sample.t})")
    if grads is None:
        return loss

    dchi = np.zeros(chi_out.shape, dtype=np.float64)
    dchi[:, slot] = weight * 2.0 * err / err.size
    if terms.window > 0:
        dchi[:, known] += weight * terms.window * 2.0 * win_err / win_err.size
    d_edges = 0.0
    if terms.cycle > 0:
        dchi_z = np.zeros(chi_z.shape, dtype=np.float64)
        dchi_z[:, other_slot] = weight * terms.cycle * 2.0 * cyc_err / cyc_err.size
        dz, codec_g = model.codec.decode_backward(z_cache, dchi_z.astype(dt))
        _accumulate(grads, "codec.", codec_g)
        dn_c, d_edges = _stack_grads(model, grads, z, dz, graph, edges, OPPOSITE[direction], backprop, x_c)
        _accumulate(grads, "codec.", model.codec.encode_backward(c_cache, dn_c))
        dchi[:, slot] += model.codec.encode_input_grad(c_cache, dn_c)[:, slot]
    dn_out, codec_g = model.codec.decode_backward(dec_cache, dchi.astype(dt))
    _accumulate(grads, "codec.", codec_g)
    if terms.latent > 0:
        d_lat = weight * terms.latent * 2.0 * lat_err / (lat_err.size * lat_scale)
        dn_out = dn_out + d_lat.astype(dt)
        _accumulate(grads, "codec.", model.codec.encode_backward(other_cache, (-d_lat).astype(dt)))
        if isinstance(model.codec, IlpParams):
            w = model.codec.W.astype(np.float64)
            d_scale = -weight * terms.latent * lat_mse / lat_scale**2
            grads["codec.W"] += (d_scale * 2.0 * w / w.shape[1]).astype(grads["codec.W"].dtype)
    dn, de = _stack_grads(model, grads, y, dn_out, graph, edges, direction, backprop, x)
    _accumulate(grads, "codec.", model.codec.encode_backward(enc_cache, dn))
    _, edge_g = mlp_backward(model.edge_enc, edge_cache, de + d_edges)
    _accumulate(grads, "edge_enc.", _mlp_named(edge_g))
    return loss


def bidirectional_loss(
    model: ModelParams,
    sample: Sample,
    noise_std: float,
    rng: np.random.Generator | None,
    loss_mode: str = "bidirectional",
    inverse_weight: float = 1.0,
    backprop: str = "recompute",
    with_grads: bool = True,
    terms: ConsistencyTerms = NO_TERMS,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """``MSE(forward) + inverse_weight * MSE(inverse)`` and its gradient w.r.t. every parameter.

    ``terms`` adds the :class:`ConsistencyTerms` to each direction.

    Noise of scale ``noise_std`` (normalized units) perturbs the input velocity
    windows only; the forward and inverse inputs share one noise draw over the
    overlapping velocities.
    """
    if loss_mode not in LOSS_MODES:
        raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
    lay = model.config.layout
    n = sample.positions.shape[0]
    noise_f = noise_i = None
    if noise_std > 0:
        if rng is None:
            raise ConfigurationError("noise needs an rng")
        # one draw per velocity in v^{t-k+1} .. v^{t+1}, laid out like the feature block
        draw = rng.normal(0.0, noise_std, size=(n, (lay.k + 1) * lay.dims))
        noise_f = draw[:, : lay.k * lay.dims]
        noise_i = draw[:, lay.dims :]
    grads = _zero_grads(model) if with_grads else None
    loss = direction_loss(model, sample, "forward", noise_f, grads, 1.0, backprop, terms, noise_i)
    if loss_mode == "bidirectional":
        loss += inverse_weight * direction_loss(
            model, sample, "inverse", noise_i, grads, inverse_weight, backprop, terms, noise_f
        )
    return loss, grads


def one_step_mse(model: ModelParams, samples: Sequence[Sample], direction: str = "forward") -> float:
    """Mean normalized velocity MSE of single predictions, no noise."""
    if not samples:
        raise ConfigurationError("no samples to evaluate")
    return float(np.mean([direction_loss(model, s, direction, None, None) for s in samples]))


@dataclass
class Checkpoint:
    train_config: TrainConfig
    model: ModelParams
    step: int = 0
    history: list[dict] = field(default_factory=list)


def _snapshot(model: ModelParams) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.named_arrays().items()}


def _restore(model: ModelParams, snap: dict[str, np.ndarray]) -> None:
    for name, arr in model.named_arrays().items():
        arr[...] = snap[name]
    model.after_update()


def split_validation(trajectories: Sequence[Trajectory]) -> tuple[list, list]:
    trajs = list(trajectories)
    if len(trajs) < 2:
        return trajs, trajs
    n_val = max(1, len(trajs) // 10)
    return trajs[:-n_val], trajs[-n_val:]


def train(
    cfg: TrainConfig,
    trajectories: Sequence[Trajectory],
    val_trajectories: Sequence[Trajectory] | None = None,
    log_path=None,
    on_eval: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Mini-batch Adam with cosine decay and early stopping on validation one-step MSE.

    Returns the checkpoint of the best validation evaluation.
    """
    if not trajectories:
        raise ConfigurationError("train needs at least one trajectory")
    if val_trajectories is None:
        trajectories, val_trajectories = split_validation(trajectories)
    normalizer = Normalizer.fit(compute_velocities(t) for t in trajectories)
    model = init_model(cfg.model, normalizer, cfg.seed)
    ckpt = Checkpoint(cfg, model, 0, [])
    if cfg.total_steps == 0:
        return ckpt

    samples = make_windows(trajectories, cfg.model.k)
    val_all = make_windows(val_trajectories, cfg.model.k)
    if not samples or not val_all:
        raise ConfigurationError("no usable training windows (trajectories too short?)")
    rng = np.random.default_rng(cfg.seed + 1)
    val_idx = np.random.default_rng(cfg.seed + 2).choice(len(val_all), min(cfg.n_val_samples, len(val_all)), replace=False)
    val = [val_all[i] for i in sorted(val_idx)]

    names = list(model.named_arrays())
    params = [model.named_arrays()[n] for n in names]
    opt = AdamState(lr0=cfg.lr0, total_steps=cfg.total_steps)
    order = rng.permutation(len(samples))
    cursor = 0
    best = (one_step_mse(model, val), _snapshot(model), 0)
    stale_evals = 0
    log_fh = open(log_path, "w") if log_path else None
    running = []
    try:
        for step in range(1, cfg.total_steps + 1):
            batch = []
            for _ in range(cfg.batch_size):
                if cursor == len(order):
                    order, cursor = rng.permutation(len(samples)), 0
                batch.append(samples[order[cursor]])
                cursor += 1
            total = None
            loss_sum = 0.0
            for s in batch:
                loss, g = bidirectional_loss(
                    model, s, cfg.noise_std, rng, cfg.loss_mode, cfg.inverse_weight, cfg.backprop,
                    terms=cfg.terms,
                )
                loss_sum += loss
                if total is None:
                    total = g
                else:
                    for n in names:
                        total[n] += g[n]
            grads = [total[n] / len(batch) for n in names]
            lr = adam_step(opt, params, grads, step - 1)
            model.after_update()
            running.append(loss_sum / len(batch))
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                val_loss = one_step_mse(model, val)
                rec = {"step": step, "lr": lr, "train_loss": float(np.mean(running)), "val_loss": val_loss}
                running = []
                ckpt.history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if on_eval:
                    on_eval(rec)
                log.info("step %d lr %.3g train %.4g val %.4g", step, lr, rec["train_loss"], val_loss)
                if val_loss < best[0]:
                    best = (val_loss, _snapshot(model), step)
                    stale_evals = 0
                else:
                    stale_evals += 1
                    if stale_evals >= cfg.patience:
                        log.info("early stop at step %d (best step %d)", step, best[2])
                        break
    finally:
        if log_fh:
            log_fh.close()
    _restore(model, best[1])
    ckpt.step = best[2]
    return ckpt


# -- checkpoint format ------------------------------------------------------
# "RGCK" | u32 version | u64 header length | JSON header | tensor payload.
# The header lists every tensor (name, dtype, shape, offset) and a CRC32 of
# the payload; all numbers little-endian.

CKPT_MAGIC = b"RGCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    tensors = dict(model.named_arrays())
    if isinstance(model.codec, IlpParams):
        if model.codec.stale:
            model.codec.refresh()
        tensors["codec.W_pinv"] = model.codec.W_pinv
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "dtype": arr.dtype.str.lstrip("<>=|"), "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "train_config": ckpt.train_config.to_dict(),
        "normalizer": {"mean": model.normalizer.mean.tolist(), "std": model.normalizer.std.tolist()},
        "step": ckpt.step,
        "history": ckpt.history,
        "tensors": table,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header).encode()
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + payload


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _CKPT_HEAD.size:
        raise TruncatedFileError("checkpoint shorter than its fixed header", len(buf))
    magic, version, head_len = _CKPT_HEAD.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"checkpoint magic mismatch: found {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _CKPT_HEAD.size
    if len(buf) < start + head_len:
        raise TruncatedFileError("truncated checkpoint header", len(buf))
    try:
        header = json.loads(buf[start : start + head_len])
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", start) from exc
    payload = buf[start + head_len :]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedFileError(
            f"checkpoint payload truncated: {len(payload)} of {header['payload_bytes']} bytes", len(buf)
        )
    if len(payload) > header["payload_bytes"]:
        raise FormatError("unexpected trailing bytes after checkpoint payload", start + head_len + header["payload_bytes"])
    if zlib.crc32(payload) != header["crc32"]:
        raise FormatError("checkpoint payload checksum mismatch", start + head_len)
    cfg = TrainConfig.from_dict(header["train_config"])
    norm = Normalizer(np.array(header["normalizer"]["mean"]), np.array(header["normalizer"]["std"]))
    model = init_model(cfg.model, norm, cfg.seed)
    arrays = model.named_arrays()
    pinv = None
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=lo).reshape(entry["shape"])
        if entry["name"] == "codec.W_pinv":
            pinv = arr.astype(np.float64)
            continue
        if entry["name"] not in arrays or arrays[entry["name"]].shape != arr.shape:
            raise FormatError(f"tensor {entry['name']} does not fit the configured model", start + head_len + lo)
        arrays[entry["name"]][...] = arr
    if isinstance(model.codec, IlpParams):
        if pinv is None:
            model.codec.refresh()
        else:
            model.codec.W_pinv = pinv
            model.codec.stale = False
    return Checkpoint(cfg, model, header["step"], header.get("history", []))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
