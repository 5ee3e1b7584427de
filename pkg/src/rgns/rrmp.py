"""Residual reversible message passing: exact forward/inverse layers and memory-lean backprop.

A layer is two additive couplings. The forward direction runs
``n1 += F(n2; e2)`` then ``n2 += G(n1; e1)``; the inverse direction runs
``n2 -= G(n1; e1)`` then ``n1 -= F(n2; e2)``. Both directions are sequences
of the same signed coupling step, so one backward routine serves both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DriftError
from .graph import RadiusGraph
from .numerics import MlpParams, init_mlp, mlp_backward, mlp_forward

EDGE_MODES = ("fixed", "updated")
SUBNETS = ("f_edge", "f_node", "g_edge", "g_node")
DEFAULT_OUT_SCALE = 0.3


@dataclass
class LatentNodes:
    n1: np.ndarray  # (N, d/2)
    n2: np.ndarray

    @classmethod
    def split(cls, n: np.ndarray) -> "LatentNodes":
        half = n.shape[1] // 2
        if n.shape[1] != 2 * half:
            raise ConfigurationError("latent width must be even")
        return cls(n[:, :half], n[:, half:])

    def join(self) -> np.ndarray:
        return np.concatenate([self.n1, self.n2], axis=1)

    def max_abs_diff(self, other: "LatentNodes") -> float:
        return float(
            max(np.max(np.abs(self.n1 - other.n1), initial=0), np.max(np.abs(self.n2 - other.n2), initial=0))
        )


@dataclass
class EdgeHalves:
    e1: np.ndarray  # (E, d/2)
    e2: np.ndarray


@dataclass
class RrmpLayerParams:
    f_edge: MlpParams
    f_node: MlpParams
    g_edge: MlpParams
    g_node: MlpParams

    def nets(self) -> dict[str, MlpParams]:
        return {name: getattr(self, name) for name in SUBNETS}

    @property
    def half(self) -> int:
        return self.f_node.out_dim


@dataclass
class RrmpStack:
    layers: list[RrmpLayerParams]
    edge_mode: str = "fixed"

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an RRMP stack needs at least one layer")
        if self.edge_mode not in EDGE_MODES:
            raise ConfigurationError(f"edge_mode must be one of {EDGE_MODES}")
        half = self.layers[0].half
        for li, layer in enumerate(self.layers):
            ok = (
                layer.f_edge.in_dim == 3 * half
                and layer.g_edge.in_dim == 3 * half
                and layer.f_node.in_dim == 2 * half
                and layer.g_node.in_dim == 2 * half
                and all(net.out_dim == half for net in layer.nets().values())
            )
            if not ok:
                raise ConfigurationError(f"layer {li} widths are inconsistent with half width {half}")

    @property
    def half(self) -> int:
        return self.layers[0].half

    @property
    def update_edges(self) -> bool:
        return self.edge_mode == "updated"


def init_layer(
    half: int, hidden: int, n_hidden: int, rng, dtype=np.float64, out_scale: float = DEFAULT_OUT_SCALE
) -> RrmpLayerParams:
    def net(n_in):
        return init_mlp([n_in] + [hidden] * n_hidden + [half], rng, dtype, out_scale=out_scale)

    return RrmpLayerParams(net(3 * half), net(2 * half), net(3 * half), net(2 * half))


def init_stack(
    n_layers: int,
    half: int,
    hidden: int,
    n_hidden: int,
    rng,
    dtype=np.float64,
    out_scale: float = DEFAULT_OUT_SCALE,
    edge_mode: str = "fixed",
) -> RrmpStack:
    return RrmpStack([init_layer(half, hidden, n_hidden, rng, dtype, out_scale) for _ in range(n_layers)], edge_mode)


def zero_stack(n_layers: int, half: int, hidden: int, n_hidden: int, dtype=np.float64) -> RrmpStack:
    """All-zero weights and biases: every layer is the identity map."""
    stack = init_stack(n_layers, half, hidden, n_hidden, np.random.default_rng(0), dtype)
    for layer in stack.layers:
        for net in layer.nets().values():
            for a in net.arrays():
                a[...] = 0
    return stack


# -- coupling steps ---------------------------------------------------------
# State is the tuple (n1, n2, e1, e2). Step "f" updates n1 from n2 conditioned
# on e2; step "g" updates n2 from n1 conditioned on e1 and, in updated edge
# mode, also adds its messages to e2.


@dataclass
class StepTape:
    edge_cache: object
    node_cache: object

    @property
    def nbytes(self) -> int:
        return self.edge_cache.nbytes + self.node_cache.nbytes


def _steps(n_layers: int, direction: str) -> list[tuple[int, str, int]]:
    if direction == "forward":
        return [(li, which, +1) for li in range(n_layers) for which in ("f", "g")]
    if direction == "inverse":
        return [(li, which, -1) for li in reversed(range(n_layers)) for which in ("g", "f")]
    raise ConfigurationError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def _check(half: int, x: np.ndarray, e: np.ndarray, graph: RadiusGraph) -> None:
    if x.shape != (graph.n_nodes, half):
        raise ConfigurationError(f"node half has shape {x.shape}, expected {(graph.n_nodes, half)}")
    if e.shape != (graph.n_edges, half):
        raise ConfigurationError(f"edge half has shape {e.shape}, expected {(graph.n_edges, half)}")


def _apply_step(layer: RrmpLayerParams, which: str, sign: int, state, graph: RadiusGraph, update_edges: bool):
    n1, n2, e1, e2 = state
    if which == "f":
        edge_net, node_net, src, cond = layer.f_edge, layer.f_node, n2, e2
    else:
        edge_net, node_net, src, cond = layer.g_edge, layer.g_node, n1, e1
    _check(layer.half, src, cond, graph)
    edge_in = np.concatenate([src[graph.receivers], src[graph.senders], cond], axis=1)
    msg, edge_cache = mlp_forward(edge_net, edge_in)
    agg = graph.aggregate(msg)
    res, node_cache = mlp_forward(node_net, np.concatenate([src, agg], axis=1))
    if which == "f":
        out = (n1 + res if sign > 0 else n1 - res, n2, e1, e2)
    else:
        new_e2 = (e2 + msg if sign > 0 else e2 - msg) if update_edges else e2
        out = (n1, n2 + res if sign > 0 else n2 - res, e1, new_e2)
    return out, StepTape(edge_cache, node_cache)


def _backward_step(layer, which, sign, tape: StepTape, graph: RadiusGraph, update_edges, grad):
    dn1, dn2, de1, de2 = grad
    if which == "f":
        edge_net, node_net, d_target, d_src, d_cond = layer.f_edge, layer.f_node, dn1, dn2, de2
    else:
        edge_net, node_net, d_target, d_src, d_cond = layer.g_edge, layer.g_node, dn2, dn1, de1
    h = layer.half
    d_in, g_node = mlp_backward(node_net, tape.node_cache, d_target if sign > 0 else -d_target)
    dmsg = d_in[:, h:][graph.receivers]
    if which == "g" and update_edges:
        dmsg = dmsg + (de2 if sign > 0 else -de2)
    d_edge_in, g_edge = mlp_backward(edge_net, tape.edge_cache, dmsg)
    d_src = d_src + d_in[:, :h] + graph.aggregate(d_edge_in[:, :h]) + graph.scatter_to_senders(d_edge_in[:, h : 2 * h])
    d_cond = d_cond + d_edge_in[:, 2 * h :]
    grads = {f"{which}_edge": g_edge, f"{which}_node": g_node}
    if which == "f":
        return (dn1, d_src, de1, d_cond), grads
    return (d_src, dn2, d_cond, de2), grads


def _run(stack: RrmpStack, state, graph, direction: str, layers=None):
    for li, which, sign in _steps(len(stack.layers), direction):
        if layers is not None and li not in layers:
            continue
        state, _ = _apply_step(stack.layers[li], which, sign, state, graph, stack.update_edges)
    return state


def _pack(nodes: LatentNodes, edges: EdgeHalves):
    return (nodes.n1, nodes.n2, edges.e1, edges.e2)


def _unpack(state, return_edges: bool):
    out = LatentNodes(state[0], state[1])
    return (out, EdgeHalves(state[2], state[3])) if return_edges else out


def layer_forward(layer: RrmpLayerParams, nodes: LatentNodes, graph, edges: EdgeHalves, update_edges=False, return_edges=False):
    state = _pack(nodes, edges)
    for which in ("f", "g"):
        state, _ = _apply_step(layer, which, +1, state, graph, update_edges)
    return _unpack(state, return_edges)


def layer_inverse(layer: RrmpLayerParams, nodes: LatentNodes, graph, edges: EdgeHalves, update_edges=False, return_edges=False):
    """Undo :func:`layer_forward` given the same conditioning edges."""
    state = _pack(nodes, edges)
    for which in ("g", "f"):
        state, _ = _apply_step(layer, which, -1, state, graph, update_edges)
    return _unpack(state, return_edges)


def stack_forward(stack: RrmpStack, nodes: LatentNodes, graph, edges: EdgeHalves, return_edges=False):
    return _unpack(_run(stack, _pack(nodes, edges), graph, "forward"), return_edges)


def stack_inverse(stack: RrmpStack, nodes: LatentNodes, graph, edges: EdgeHalves, return_edges=False):
    """Layers undone in reverse order. In updated edge mode ``edges`` is the output-side edge state."""
    return _unpack(_run(stack, _pack(nodes, edges), graph, "inverse"), return_edges)


def stack_apply(stack: RrmpStack, nodes: LatentNodes, graph, edges: EdgeHalves, direction: str, return_edges=False):
    return _unpack(_run(stack, _pack(nodes, edges), graph, direction), return_edges)


@dataclass
class ActivationMeter:
    """Counts coupling-step activation records held alive during backprop."""

    live_records: int = 0
    live_bytes: int = 0
    peak_records: int = 0
    peak_bytes: int = 0

    def hold(self, tape: StepTape) -> None:
        self.live_records += 1
        self.live_bytes += tape.nbytes
        self.peak_records = max(self.peak_records, self.live_records)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def release(self, tape: StepTape) -> None:
        self.live_records -= 1
        self.live_bytes -= tape.nbytes


@dataclass
class StackGradients:
    nodes: LatentNodes
    layers: list[dict[str, MlpParams]]
    edges: EdgeHalves
    meter: ActivationMeter = field(default_factory=ActivationMeter)


def drift_guard(dtype) -> float:
    return 1e-3 if np.dtype(dtype) == np.float32 else 1e-8


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(a - b), initial=0.0))


def stack_backward(
    stack: RrmpStack,
    output_nodes: LatentNodes,
    output_grad: LatentNodes,
    graph: RadiusGraph,
    edges: EdgeHalves,
    direction: str = "forward",
    mode: str = "recompute",
    input_nodes: LatentNodes | None = None,
    meter: ActivationMeter | None = None,
) -> StackGradients:
    """Gradients of ``<output_grad, stack_apply(x)>`` w.r.t. ``x``, every weight and the input edges.

    ``mode="recompute"`` walks the coupling steps backwards from
    ``output_nodes``, rebuilding each step's input by undoing it, so only one
    step's activations are alive at any time. ``mode="stored"`` reruns the
    pass from ``input_nodes`` keeping all activations (the reference path).

    ``edges`` is the edge state the pass started from. In updated edge mode
    the output edge state is needed to undo steps, so ``input_nodes`` is
    required there as well.
    """
    meter = meter if meter is not None else ActivationMeter()
    upd = stack.update_edges
    steps = _steps(len(stack.layers), direction)
    grad = (output_grad.n1, output_grad.n2, np.zeros_like(edges.e1), np.zeros_like(edges.e2))
    layer_grads: list[dict] = [dict() for _ in stack.layers]

    def record(li, g):
        for name, val in g.items():
            if name in layer_grads[li]:
                acc = layer_grads[li][name]
                for a, b in zip(acc.arrays(), val.arrays()):
                    a += b
            else:
                layer_grads[li][name] = val

    if mode == "stored":
        if input_nodes is None:
            raise ConfigurationError("stored-activation backprop needs the pass input")
        state = _pack(input_nodes, edges)
        tapes = []
        for li, which, sign in steps:
            state, tape = _apply_step(stack.layers[li], which, sign, state, graph, upd)
            meter.hold(tape)
            tapes.append(tape)
        for si in range(len(steps) - 1, -1, -1):
            li, which, sign = steps[si]
            grad, g = _backward_step(stack.layers[li], which, sign, tapes[si], graph, upd, grad)
            record(li, g)
            meter.release(tapes[si])
            tapes[si] = None
    elif mode == "recompute":
        guard = drift_guard(output_nodes.n1.dtype)
        if upd:
            if input_nodes is None:
                raise ConfigurationError("updated edge mode needs input_nodes to rebuild the output edge state")
            state = _run(stack, _pack(input_nodes, edges), graph, direction)
            state = (output_nodes.n1, output_nodes.n2, state[2], state[3])
        else:
            state = _pack(output_nodes, edges)
        for si in range(len(steps) - 1, -1, -1):
            li, which, sign = steps[si]
            layer = stack.layers[li]
            prev, _ = _apply_step(layer, which, -sign, state, graph, upd)
            redo, tape = _apply_step(layer, which, sign, prev, graph, upd)
            meter.hold(tape)
            scale = max(1.0, float(np.max(np.abs(state[0]), initial=0)), float(np.max(np.abs(state[1]), initial=0)))
            drift = max(_max_abs(redo[0], state[0]), _max_abs(redo[1], state[1]))
            if not drift <= guard * scale:  # also catches NaN
                raise DriftError(f"layer {li} ({which}-coupling): recomputation drifted by {drift:.3e}")
            grad, g = _backward_step(layer, which, sign, tape, graph, upd, grad)
            record(li, g)
            meter.release(tape)
            state = prev
    else:
        raise ConfigurationError(f"unknown backprop mode {mode!r}")
    ordered = [{name: lg[name] for name in SUBNETS} for lg in layer_grads]
    return StackGradients(LatentNodes(grad[0], grad[1]), ordered, EdgeHalves(grad[2], grad[3]), meter)
