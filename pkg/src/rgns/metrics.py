"""Evaluation metrics, goal-target rasterization and run reports."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from .errors import ConfigurationError, InsufficientDataError
from .particles import StepState, Trajectory, state_from_trajectory
from .simulator import ModelParams, RolloutResult, inverse_rollout, rollout

EXACT_OT_MAX = 512
SINKHORN_REG = 1e-3
SINKHORN_ITERS = 1000


def _positions(x) -> np.ndarray:
    if isinstance(x, (RolloutResult, Trajectory)):
        return np.asarray(x.positions, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def rollout_mse(pred, truth) -> float:
    """Mean over frames, particles and axes of the squared position error.

    Both arguments are ``(S, N, D)`` position stacks (or objects with a
    ``positions`` attribute) covering the same frames.
    """
    a, b = _positions(pred), _positions(truth)
    if a.shape != b.shape:
        raise ConfigurationError(f"rollout shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def forecast_mse(model: ModelParams, traj: Trajectory, state: StepState, n_steps: int) -> float:
    """Roll ``state`` (taken at ``state.time_index`` of ``traj``) forward and score the predicted frames."""
    t0 = state.time_index
    if t0 + n_steps >= traj.n_steps:
        raise ConfigurationError(f"trajectory has no ground truth for {n_steps} steps after frame {t0}")
    pred = rollout(model, state, n_steps)
    return rollout_mse(pred.positions[1:], traj.positions[t0 + 1 : t0 + n_steps + 1])


def consistency_mse(model: ModelParams, state: StepState, n_steps: int) -> float:
    """Invert ``n_steps`` from ``state``, roll forward again, compare final positions with ``state``."""
    back = inverse_rollout(model, state, n_steps)
    again = rollout(model, back.last, n_steps)
    return float(np.mean((again.last.positions - state.positions) ** 2))


def ot_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared-Euclidean cost of the optimal one-to-one matching between ``a`` and ``b``.

    Exact assignment up to ``EXACT_OT_MAX`` points, log-domain Sinkhorn above.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"point sets must have equal size and dimension: {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise InsufficientDataError("optimal transport of empty point sets")
    cost = cdist(a, b, "sqeuclidean")
    if len(a) <= EXACT_OT_MAX:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / len(a))
    return sinkhorn_cost(cost, SINKHORN_REG, SINKHORN_ITERS)


def sinkhorn_cost(cost: np.ndarray, reg: float, n_iter: int) -> float:
    """Transport cost of the entropic plan between uniform marginals."""
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    scaled = -cost / reg
    for _ in range(n_iter):
        f = log_a - logsumexp(scaled + g[None, :], axis=1)
        g = log_b - logsumexp(scaled + f[:, None], axis=0)
    plan = np.exp(scaled + f[:, None] + g[None, :])
    return float(np.sum(plan * cost))


def ot_brute_force(a: np.ndarray, b: np.ndarray) -> float:
    """Reference: minimum over all ``n!`` matchings, summed in row order like :func:`ot_distance`."""
    cost = cdist(np.asarray(a, np.float64), np.asarray(b, np.float64), "sqeuclidean")
    n = len(cost)
    rows = np.arange(n)
    return float(min(cost[rows, list(p)].sum() for p in permutations(range(n))) / n)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    dist = pdist(np.concatenate([a, b]))
    med = float(np.median(dist)) if dist.size else 0.0
    return med if med > 0 else 1.0


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None, unbiased: bool = True) -> float:
    """Squared MMD with kernel ``exp(-|x-y|^2 / (2 h^2))``; ``h`` defaults to the median pairwise distance.

    The unbiased estimate drops the diagonal terms and can be slightly
    negative; ``unbiased=False`` gives the V-statistic, which is zero for
    identical samples.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        raise InsufficientDataError("mmd needs nonempty samples")
    if unbiased and (m < 2 or n < 2):
        raise InsufficientDataError("the unbiased mmd estimate needs at least two points per set")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ConfigurationError("bandwidth must be positive")
    kaa = np.exp(-cdist(a, a, "sqeuclidean") / (2 * h * h))
    kbb = np.exp(-cdist(b, b, "sqeuclidean") / (2 * h * h))
    kab = np.exp(-cdist(a, b, "sqeuclidean") / (2 * h * h))
    if unbiased:
        xx = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        yy = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    else:
        xx = kaa.sum() / (m * m)
        yy = kbb.sum() / (n * n)
    return float(xx + yy - 2.0 * kab.sum() / (m * n))


# -- goal targets -------------------------------------------------------------


def parse_mask(text: str) -> np.ndarray:
    """Rows of ``'.'`` (empty) and ``'#'`` (occupied); the first row is the top of the box."""
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        raise ConfigurationError("mask has no rows")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ConfigurationError(f"mask row {i} has width {len(row)}, expected {width}")
        bad = set(row) - {".", "#"}
        if bad:
            raise ConfigurationError(f"mask row {i} has characters other than '.' and '#': {sorted(bad)}")
    return np.array([[c == "#" for c in row] for row in rows])


def format_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in np.asarray(mask, bool)) + "\n"


def read_mask(path) -> np.ndarray:
    return parse_mask(Path(path).read_text())


def cell_centers(mask: np.ndarray, box_lo, box_hi) -> np.ndarray:
    """Centers of occupied cells in row-major order (top row first)."""
    mask = np.asarray(mask, bool)
    rows, cols = mask.shape
    lo = np.asarray(box_lo, np.float64)
    hi = np.asarray(box_hi, np.float64)
    i, j = np.nonzero(mask)
    x = lo[0] + (j + 0.5) * (hi[0] - lo[0]) / cols
    y = lo[1] + (rows - 1 - i + 0.5) * (hi[1] - lo[1]) / rows
    return np.stack([x, y], axis=1)


def rasterize_target(
    mask: np.ndarray, box_lo, box_hi, n_max: int | None = None, k: int = 5, rng: np.random.Generator | None = None
) -> StepState:
    """A resting particle configuration with one particle per occupied cell."""
    mask = np.asarray(mask, bool)
    if mask.ndim != 2:
        raise ConfigurationError("occupancy masks are 2D")
    if not mask.any():
        raise ConfigurationError("mask has no occupied cells")
    pos = cell_centers(mask, box_lo, box_hi)
    if n_max is not None and len(pos) > n_max:
        rng = rng or np.random.default_rng(0)
        pos = pos[np.sort(rng.choice(len(pos), n_max, replace=False))]
    n = len(pos)
    return StepState(pos, np.zeros((k, n, 2)), np.zeros(n, dtype=np.int64), 0)


# -- reports --------------------------------------------------------------------


@dataclass
class MetricReport:
    rollout_mse: float
    consistency: dict[int, float]
    ot: float
    mmd: float
    timings: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        values = [self.rollout_mse, self.ot, *self.consistency.values(), *self.timings.values()]
        if not all(np.isfinite(v) for v in values + [self.mmd]):
            raise ConfigurationError("metric report has non-finite entries")
        # the unbiased MMD estimate may dip just below zero
        if any(v < 0 for v in values):
            raise ConfigurationError("metric report has negative entries")

    def to_json(self) -> str:
        data = asdict(self)
        data["consistency"] = {str(k): v for k, v in self.consistency.items()}
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        data["consistency"] = {int(k): v for k, v in data["consistency"].items()}
        return cls(**data)


def run_manifest(command: str, config: dict, seed: int, diagnostics=(), extra: dict | None = None) -> dict:
    """JSON-ready record of one CLI run."""
    out = {
        "command": command,
        "seed": seed,
        "config": config,
        "diagnostics": [asdict(d) for d in diagnostics],
    }
    if extra:
        out.update(extra)
    return out


def held_out_states(trajectories, k: int, t: int) -> list[StepState]:
    return [state_from_trajectory(tr, t, k) for tr in trajectories]


def evaluate(
    model: ModelParams,
    trajectories,
    horizon: int = 40,
    consistency_steps=(10, 20, 40),
    start: int | None = None,
) -> MetricReport:
    """Score ``model`` on held-out trajectories.

    Every trajectory contributes one forward rollout of ``horizon`` steps from
    frame ``start`` (default ``k``), a consistency measurement at the rollout's
    end frame for each ``K``, and OT/MMD between the predicted and true end frames.
    """
    k = model.config.k
    start = k if start is None else start
    ticks = {}
    t0 = time.perf_counter()
    states = held_out_states(trajectories, k, start)
    roll, ots, mmds = [], [], []
    for tr, st in zip(trajectories, states):
        pred = rollout(model, st, horizon)
        truth = tr.positions[start + 1 : start + horizon + 1]
        roll.append(rollout_mse(pred.positions[1:], truth))
        ots.append(ot_distance(pred.last.positions, truth[-1]))
        mmds.append(mmd(pred.last.positions, truth[-1]))
    ticks["rollout"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ends = held_out_states(trajectories, k, start + horizon)
    cons = {int(K): float(np.mean([consistency_mse(model, s, K) for s in ends])) for K in consistency_steps}
    ticks["consistency"] = time.perf_counter() - t0
    return MetricReport(float(np.mean(roll)), cons, float(np.mean(ots)), float(np.mean(mmds)), ticks)
