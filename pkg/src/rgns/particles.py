"""Trajectory data model, the RGNS binary file format and the toy generator."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, FormatError, GenerationError, InsufficientDataError, TruncatedFileError

MAGIC = b"RGNS"
FORMAT_VERSION = 1
DEFAULT_HISTORY = 5


@dataclass(frozen=True, eq=False)
class Trajectory:
    dt: float
    radius: float
    box_lo: np.ndarray
    box_hi: np.ndarray
    materials: np.ndarray
    positions: np.ndarray  # (T, N, D) float32

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float32)
        lo = np.asarray(self.box_lo, dtype=np.float64)
        hi = np.asarray(self.box_hi, dtype=np.float64)
        mats = np.asarray(self.materials, dtype=np.uint8)
        if pos.ndim != 3 or pos.shape[2] not in (2, 3):
            raise ConfigurationError(f"positions must be (T, N, D) with D in (2, 3), got {pos.shape}")
        if lo.shape != (pos.shape[2],) or hi.shape != lo.shape or np.any(hi <= lo):
            raise ConfigurationError("box bounds must be per-axis with box_hi > box_lo")
        if not (self.dt > 0 and self.radius > 0):
            raise ConfigurationError("dt and radius must be positive")
        if mats.shape != (pos.shape[1],):
            raise ConfigurationError("need one material code per particle")
        if not np.all(np.isfinite(pos)) or np.any(pos < lo) or np.any(pos > hi):
            raise ConfigurationError("positions must be finite and inside the box")
        for name, val in (("positions", pos), ("box_lo", lo), ("box_hi", hi), ("materials", mats)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dims(self) -> int:
        return self.positions.shape[2]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.radius == other.radius
            and np.array_equal(self.box_lo, other.box_lo)
            and np.array_equal(self.box_hi, other.box_hi)
            and np.array_equal(self.materials, other.materials)
            and self.positions.shape == other.positions.shape
            and self.positions.tobytes() == other.positions.tobytes()
        )


@dataclass
class StepState:
    """Positions at time ``t`` plus the velocity window ``v^{t-k+1} .. v^t`` (oldest first)."""

    positions: np.ndarray  # (N, D)
    vel_window: np.ndarray  # (k, N, D)
    materials: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.vel_window = np.asarray(self.vel_window, dtype=np.float64)
        self.materials = np.asarray(self.materials, dtype=np.uint8)
        n, d = self.positions.shape
        if self.vel_window.ndim != 3 or self.vel_window.shape[1:] != (n, d):
            raise ConfigurationError(f"vel_window shape {self.vel_window.shape} does not match positions {(n, d)}")
        if self.materials.shape != (n,):
            raise ConfigurationError("need one material code per particle")

    @property
    def k(self) -> int:
        return self.vel_window.shape[0]

    def copy(self) -> "StepState":
        return StepState(self.positions.copy(), self.vel_window.copy(), self.materials.copy(), self.time_index)


@dataclass
class ToyGenConfig:
    dims: int = 2
    n_particles: int = 150
    n_steps: int = 200
    dt: float = 0.01
    box_lo: tuple = (0.0, 0.0)
    box_hi: tuple = (1.0, 1.0)
    gravity: tuple = (0.0, -2.0)
    damping: float = 0.005
    repulsion_stiffness: float = 60.0
    repulsion_radius: float = 0.04
    restitution: float = 0.3
    radius: float = 0.07
    lattice_spacing: float = 0.032
    initial_speed: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ConfigurationError("dims must be 2 or 3")
        for name in ("box_lo", "box_hi", "gravity"):
            if len(getattr(self, name)) != self.dims:
                raise ConfigurationError(f"{name} must have {self.dims} components")
        if not 0 <= self.damping < 1:
            raise ConfigurationError("damping must lie in [0, 1)")
        if not 0 <= self.restitution < 1:
            raise ConfigurationError("restitution must lie in [0, 1)")
        if self.n_particles < 1 or self.n_steps < 1 or self.dt <= 0 or self.radius <= 0:
            raise ConfigurationError("n_particles, n_steps, dt and radius must be positive")
        if self.repulsion_radius <= 0 or self.repulsion_stiffness < 0:
            raise ConfigurationError("repulsion parameters out of range")
        if np.any(np.asarray(self.box_hi) <= np.asarray(self.box_lo)):
            raise ConfigurationError("box_hi must exceed box_lo on every axis")


def _f32_box(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest float32 box contained in [lo, hi]."""
    lo32 = lo.astype(np.float32)
    hi32 = hi.astype(np.float32)
    lo32 = np.where(lo32 < lo, np.nextafter(lo32, np.float32(np.inf)), lo32)
    hi32 = np.where(hi32 > hi, np.nextafter(hi32, np.float32(-np.inf)), hi32)
    return lo32, hi32


def repulsion_forces(pos: np.ndarray, stiffness: float, h: float) -> tuple[np.ndarray, float]:
    """Soft pairwise repulsion ``k (1 - d/h)`` along the pair axis, and its potential energy."""
    forces = np.zeros_like(pos)
    if stiffness == 0 or len(pos) < 2:
        return forces, 0.0
    pairs = cKDTree(pos).query_pairs(h, output_type="ndarray")
    if len(pairs) == 0:
        return forces, 0.0
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    i, j = pairs[:, 0], pairs[:, 1]
    diff = pos[i] - pos[j]
    dist = np.linalg.norm(diff, axis=1)
    ok = dist > 0
    i, j, diff, dist = i[ok], j[ok], diff[ok], dist[ok]
    mag = stiffness * (1.0 - dist / h)
    f = diff * (mag / dist)[:, None]
    np.add.at(forces, i, f)
    np.add.at(forces, j, -f)
    energy = float(np.sum(0.5 * stiffness * h * (1.0 - dist / h) ** 2))
    return forces, energy


def initial_block(cfg: ToyGenConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Jittered lattice block at a random spot in the box, with a shared random velocity."""
    lo = np.asarray(cfg.box_lo, dtype=np.float64)
    hi = np.asarray(cfg.box_hi, dtype=np.float64)
    per_side = math.ceil(cfg.n_particles ** (1.0 / cfg.dims))
    axes = [np.arange(per_side)] * cfg.dims
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, cfg.dims)[: cfg.n_particles]
    extent = (per_side - 1) * cfg.lattice_spacing
    margin = 0.5 * cfg.lattice_spacing
    room = (hi - lo) - extent - 2 * margin
    if np.any(room < 0):
        raise ConfigurationError("particle block does not fit in the box; reduce lattice_spacing")
    offset = lo + margin + rng.uniform(0.0, 1.0, cfg.dims) * room
    pos = offset + grid * cfg.lattice_spacing
    pos = pos + rng.uniform(-0.1, 0.1, pos.shape) * cfg.lattice_spacing
    pos = np.clip(pos, lo, hi)
    vel = rng.uniform(-cfg.initial_speed, cfg.initial_speed, cfg.dims)
    vel = np.broadcast_to(vel, pos.shape) + rng.normal(0.0, 0.05 * cfg.initial_speed, pos.shape)
    return pos, vel


def integrate(
    cfg: ToyGenConfig, pos: np.ndarray, vel: np.ndarray
) -> tuple[np.ndarray, list[float]]:
    """Symplectic Euler from ``(pos, vel)``; returns (T, N, D) float64 frames and per-frame energy."""
    lo = np.asarray(cfg.box_lo, dtype=np.float64)
    hi = np.asarray(cfg.box_hi, dtype=np.float64)
    g = np.asarray(cfg.gravity, dtype=np.float64)
    extent = float(np.max(hi - lo))
    pos = pos.copy()
    vel = vel.copy()
    frames = np.empty((cfg.n_steps, len(pos), cfg.dims))
    frames[0] = pos
    energies = []

    def energy(p, v, pe_rep):
        return float(0.5 * np.sum(v * v) - np.sum((p - lo) @ g) + pe_rep)

    forces, pe = repulsion_forces(pos, cfg.repulsion_stiffness, cfg.repulsion_radius)
    energies.append(energy(pos, vel, pe))
    for step in range(1, cfg.n_steps):
        vel = (vel + cfg.dt * (g + forces)) * (1.0 - cfg.damping)
        pos = pos + cfg.dt * vel
        below = pos < lo
        above = pos > hi
        pos = np.where(below, lo, np.where(above, hi, pos))
        vel = np.where(below & (vel < 0) | above & (vel > 0), -cfg.restitution * vel, vel)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise GenerationError("non-finite particle state", step)
        if np.max(np.abs(vel)) * cfg.dt > extent:
            raise GenerationError("particle crossed the whole box in one step (integration blow-up)", step)
        frames[step] = pos
        forces, pe = repulsion_forces(pos, cfg.repulsion_stiffness, cfg.repulsion_radius)
        energies.append(energy(pos, vel, pe))
    return frames, energies


def generate_trajectory(cfg: ToyGenConfig) -> Trajectory:
    """Damped gravity + soft repulsion + inelastic walls, deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pos, vel = initial_block(cfg, rng)
    frames, _ = integrate(cfg, pos, vel)
    lo = np.asarray(cfg.box_lo, dtype=np.float64)
    hi = np.asarray(cfg.box_hi, dtype=np.float64)
    lo32, hi32 = _f32_box(lo, hi)
    frames32 = np.clip(frames.astype(np.float32), lo32, hi32)
    return Trajectory(
        dt=cfg.dt,
        radius=cfg.radius,
        box_lo=lo,
        box_hi=hi,
        materials=np.zeros(cfg.n_particles, dtype=np.uint8),
        positions=frames32,
    )


def compute_velocities(traj: Trajectory) -> np.ndarray:
    """Backward differences ``v^t = (p^t - p^{t-1}) / dt``; row ``s`` holds ``v^{s+1}``."""
    if traj.n_steps < 2:
        raise InsufficientDataError("need at least two frames to difference velocities")
    pos = traj.positions.astype(np.float64)
    return (pos[1:] - pos[:-1]) / traj.dt


def state_from_trajectory(traj: Trajectory, t: int, k: int = DEFAULT_HISTORY, velocities=None) -> StepState:
    if t < k:
        raise InsufficientDataError(f"time {t} has fewer than k={k} prior velocities")
    if t >= traj.n_steps:
        raise InsufficientDataError(f"time {t} beyond trajectory length {traj.n_steps}")
    vel = compute_velocities(traj) if velocities is None else velocities
    return StepState(
        positions=traj.positions[t].astype(np.float64),
        vel_window=vel[t - k : t].copy(),
        materials=traj.materials.copy(),
        time_index=t,
    )


_HEAD = struct.Struct("<4sIIIIdd")


def encode_trajectory(traj: Trajectory) -> bytes:
    d = traj.dims
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, d, traj.n_particles, traj.n_steps, traj.dt, traj.radius)
    return b"".join(
        [
            head,
            traj.box_lo.astype("<f8").tobytes(),
            traj.box_hi.astype("<f8").tobytes(),
            traj.materials.astype(np.uint8).tobytes(),
            traj.positions.astype("<f4").tobytes(),
        ]
    )


def decode_trajectory(buf: bytes) -> Trajectory:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic bytes", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"magic mismatch: expected {MAGIC!r}, found {bytes(buf[:4])!r}", 0)
    if len(buf) < _HEAD.size:
        raise TruncatedFileError("truncated header", len(buf))
    _, version, d, n, t, dt, radius = _HEAD.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})", 4)
    if d not in (2, 3):
        raise FormatError(f"invalid spatial dimension {d}", 8)
    off = _HEAD.size
    sizes = [("box_lo", 8 * d), ("box_hi", 8 * d), ("materials", n), ("positions", 4 * t * n * d)]
    parts = {}
    for name, size in sizes:
        if len(buf) < off + size:
            raise TruncatedFileError(f"truncated {name} payload: need {size} bytes", len(buf))
        parts[name] = buf[off : off + size]
        off += size
    if len(buf) != off:
        raise FormatError(f"{len(buf) - off} unexpected trailing bytes", off)
    try:
        return Trajectory(
            dt=dt,
            radius=radius,
            box_lo=np.frombuffer(parts["box_lo"], dtype="<f8").astype(np.float64),
            box_hi=np.frombuffer(parts["box_hi"], dtype="<f8").astype(np.float64),
            materials=np.frombuffer(parts["materials"], dtype=np.uint8).copy(),
            positions=np.frombuffer(parts["positions"], dtype="<f4").astype(np.float32).reshape(t, n, d),
        )
    except ConfigurationError as exc:
        raise FormatError(f"decoded trajectory is invalid: {exc}", _HEAD.size) from exc


def write_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_bytes(encode_trajectory(traj))


def read_trajectory(path) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes())


def export_frames_csv(frames: np.ndarray, path, first_step: int = 0) -> None:
    """Write ``(T, N, D)`` positions as rows ``step,particle,x,y[,z]``."""
    frames = np.asarray(frames)
    d = frames.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "particle"] + ["x", "y", "z"][:d])
        for s, frame in enumerate(frames):
            for i, p in enumerate(frame):
                w.writerow([first_step + s, i] + [repr(float(c)) for c in p])
