"""Forward and inverse stepping, rollouts in both directions, goal-conditioned inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, RolloutDivergedError
from .graph import FeatureLayout, Normalizer, RadiusGraph, assemble_node_features, build_radius_graph, edge_features
from .ilp import IlpParams, MlpCodec, encode_edges, init_edge_encoder, init_ilp, init_mlp_codec, padding_ilp
from .numerics import MlpParams
from .particles import StepState
from .rrmp import DEFAULT_OUT_SCALE, EdgeHalves, LatentNodes, RrmpStack, init_stack, stack_apply, zero_stack

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    dims: int = 2
    k: int = 5
    latent_dim: int = 128
    n_layers: int = 10
    hidden: int = 128
    n_hidden: int = 2
    radius: float = 0.07
    dt: float = 0.01
    box_lo: tuple = (0.0, 0.0)
    box_hi: tuple = (1.0, 1.0)
    n_materials: int = 1
    walls: bool = True
    codec: str = "ilp"
    edge_mode: str = "fixed"
    precision: str = "float32"
    out_scale: float = DEFAULT_OUT_SCALE

    def __post_init__(self):
        self.box_lo = tuple(float(x) for x in self.box_lo)
        self.box_hi = tuple(float(x) for x in self.box_hi)
        if self.latent_dim % 2:
            raise ConfigurationError("latent_dim must be even")
        if self.n_layers < 1 or self.k < 1:
            raise ConfigurationError("need at least one layer and one history slot")
        if self.codec not in ("ilp", "mlp"):
            raise ConfigurationError("codec must be 'ilp' or 'mlp'")
        if self.precision not in DTYPES:
            raise ConfigurationError(f"precision must be one of {sorted(DTYPES)}")
        if len(self.box_lo) != self.dims or len(self.box_hi) != self.dims:
            raise ConfigurationError("box bounds must match dims")
        if self.latent_dim <= self.layout.width:
            raise ConfigurationError(f"latent_dim {self.latent_dim} must exceed node feature width {self.layout.width}")

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(self.k, self.dims, self.n_materials, self.walls)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.box_lo), np.asarray(self.box_hi)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """One parameter set shared by the forward and the inverse direction."""

    config: ModelConfig
    codec: IlpParams | MlpCodec
    edge_enc: MlpParams
    stack: RrmpStack
    normalizer: Normalizer

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every learnable array under a stable dotted name (the parameter registry)."""
        out = {f"codec.{k}": v for k, v in self.codec.named_arrays().items()}
        for li, (w, b) in enumerate(zip(self.edge_enc.weights, self.edge_enc.biases)):
            out[f"edge_enc.w{li}"] = w
            out[f"edge_enc.b{li}"] = b
        for l_idx, layer in enumerate(self.stack.layers):
            for name, net in layer.nets().items():
                for li, (w, b) in enumerate(zip(net.weights, net.biases)):
                    out[f"stack.{l_idx}.{name}.w{li}"] = w
                    out[f"stack.{l_idx}.{name}.b{li}"] = b
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def after_update(self) -> None:
        """Call after any in-place change to the codec weights."""
        self.codec.mark_stale()
        self.codec.refresh()


def init_model(config: ModelConfig, normalizer: Normalizer, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    dt = config.dtype
    c = config.layout.width
    if config.codec == "ilp":
        codec = init_ilp(c, config.latent_dim, rng, dt)
    else:
        codec = init_mlp_codec(c, config.latent_dim, config.hidden, rng, dt)
    edge_enc = init_edge_encoder(config.dims + 1, config.latent_dim, config.hidden, config.n_hidden, rng, dt)
    stack = init_stack(
        config.n_layers, config.latent_dim // 2, config.hidden, config.n_hidden, rng, dt, config.out_scale, config.edge_mode
    )
    return ModelParams(config, codec, edge_enc, stack, normalizer)


def identity_model(config: ModelConfig, normalizer: Normalizer | None = None) -> ModelParams:
    """Padding codec ``W = [I; 0]`` and an all-zero stack: the latent update is the identity."""
    if config.codec != "ilp":
        raise ConfigurationError("the identity model uses the ILP codec")
    dt = config.dtype
    c = config.layout.width
    model = init_model(config, normalizer or Normalizer.identity(config.dims))
    model.codec = padding_ilp(c, config.latent_dim, dt)
    model.stack = zero_stack(config.n_layers, config.latent_dim // 2, config.hidden, config.n_hidden, dt)
    model.stack.edge_mode = config.edge_mode
    return model


@dataclass
class StepDiagnostics:
    step: int
    n_edges: int
    wall_contacts: int
    latent_residual: float


@dataclass
class RolloutResult:
    frames: list[StepState]
    direction: str
    diagnostics: list[StepDiagnostics] = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames])

    @property
    def last(self) -> StepState:
        return self.frames[-1]


@dataclass
class PassResult:
    chi_out: np.ndarray
    latent_out: np.ndarray
    graph: RadiusGraph


def conditioning(model: ModelParams, positions: np.ndarray) -> tuple[RadiusGraph, np.ndarray]:
    cfg = model.config
    graph = build_radius_graph(positions, cfg.radius, cfg.box)
    return graph, edge_features(graph, positions, cfg.radius).astype(cfg.dtype)


def latent_pass(model: ModelParams, window: np.ndarray, positions: np.ndarray, materials, direction: str) -> PassResult:
    """Encode the window at ``positions``, run the stack in ``direction``, decode."""
    cfg = model.config
    graph, geom = conditioning(model, positions)
    e1, e2, _ = encode_edges(model.edge_enc, geom)
    chi = assemble_node_features(
        window, positions, materials, cfg.box, cfg.radius, model.normalizer, cfg.n_materials, cfg.walls
    )
    n, _ = model.codec.encode(chi.astype(cfg.dtype))
    out = stack_apply(model.stack, LatentNodes.split(n), graph, EdgeHalves(e1, e2), direction).join()
    chi_out, _ = model.codec.decode(out)
    return PassResult(chi_out, out, graph)


def latent_residual(model: ModelParams, latent: np.ndarray) -> float:
    """RMS distance of ``latent`` from the codec's image (zero when the step is exactly invertible)."""
    back, _ = model.codec.decode(latent)
    again, _ = model.codec.encode(back)
    return float(np.sqrt(np.mean((np.asarray(again, np.float64) - latent) ** 2)))


def _predicted(model: ModelParams, res: PassResult, slot: int, step: int) -> np.ndarray:
    lay = model.config.layout
    v = model.normalizer.denormalize(res.chi_out[:, lay.slot(slot)].astype(np.float64))
    if not np.all(np.isfinite(v)):
        raise RolloutDivergedError("non-finite velocity prediction", step)
    return v


def forward_step(model: ModelParams, state: StepState, diagnostics: list | None = None) -> StepState:
    """One application of the forward operator: predict ``v^{t+1}``, then ``p^{t+1} = p^t + dt v^{t+1}``."""
    cfg = model.config
    _check_state(model, state)
    res = latent_pass(model, state.vel_window, state.positions, state.materials, "forward")
    v_new = _predicted(model, res, -1, state.time_index)
    lo, hi = cfg.box
    cand = state.positions + cfg.dt * v_new
    # components that would leave the box stop at the wall: normal velocity zeroed
    hit = (cand < lo) | (cand > hi)
    v_new = np.where(hit, 0.0, v_new)
    positions = state.positions + cfg.dt * v_new
    window = np.concatenate([state.vel_window[1:], v_new[None]], axis=0)
    if diagnostics is not None:
        diagnostics.append(
            StepDiagnostics(state.time_index, res.graph.n_edges, int(hit.sum()), latent_residual(model, res.latent_out))
        )
    return StepState(positions, window, state.materials.copy(), state.time_index + 1)


def inverse_step(model: ModelParams, state: StepState, diagnostics: list | None = None) -> StepState:
    """One application of the inverse operator: ``p^t = p^{t+1} - dt v^{t+1}``, then infer ``v^{t-k+1}``."""
    cfg = model.config
    _check_state(model, state)
    lo, hi = cfg.box
    prev = state.positions - cfg.dt * state.vel_window[-1]
    hit = (prev < lo) | (prev > hi)
    prev = np.clip(prev, lo, hi)
    res = latent_pass(model, state.vel_window, prev, state.materials, "inverse")
    v_old = _predicted(model, res, 0, state.time_index)
    window = np.concatenate([v_old[None], state.vel_window[:-1]], axis=0)
    if diagnostics is not None:
        diagnostics.append(
            StepDiagnostics(state.time_index, res.graph.n_edges, int(hit.sum()), latent_residual(model, res.latent_out))
        )
    return StepState(prev, window, state.materials.copy(), state.time_index - 1)


def _check_state(model: ModelParams, state: StepState) -> None:
    cfg = model.config
    if state.k != cfg.k or state.positions.shape[1] != cfg.dims:
        raise ConfigurationError(
            f"state has k={state.k}, D={state.positions.shape[1]}; model expects k={cfg.k}, D={cfg.dims}"
        )


def rollout(model: ModelParams, state0: StepState, n_steps: int) -> RolloutResult:
    if n_steps < 1:
        raise ConfigurationError("rollout needs at least one step")
    result = RolloutResult([state0], "forward")
    state = state0
    for _ in range(n_steps):
        state = forward_step(model, state, result.diagnostics)
        result.frames.append(state)
    return result


def inverse_rollout(model: ModelParams, state_k: StepState, n_steps: int) -> RolloutResult:
    if n_steps < 1:
        raise ConfigurationError("inverse rollout needs at least one step")
    result = RolloutResult([state_k], "inverse")
    state = state_k
    for _ in range(n_steps):
        state = inverse_step(model, state, result.diagnostics)
        result.frames.append(state)
    return result


@dataclass
class GoalResult:
    inferred: StepState
    inverse: RolloutResult | None
    reproduced: RolloutResult
    consistency_mse: float


def goal_condition(model: ModelParams, target: StepState, n_steps: int) -> GoalResult:
    """Infer an initial state ``n_steps`` back from ``target`` and roll it forward again."""
    if n_steps == 0:
        return GoalResult(target, None, RolloutResult([target], "forward"), 0.0)
    inv = inverse_rollout(model, target, n_steps)
    rep = rollout(model, inv.last, n_steps)
    mse = float(np.mean((rep.last.positions - target.positions) ** 2))
    return GoalResult(inv.last, inv, rep, mse)
