"""Fast invariant checks behind ``rgns selftest``."""

from __future__ import annotations

import numpy as np

from .graph import Normalizer, brute_force_edges, build_radius_graph
from .ilp import decode, encode, init_ilp
from .metrics import consistency_mse, ot_brute_force, ot_distance
from .particles import StepState
from .rrmp import EdgeHalves, LatentNodes, init_stack, stack_forward, stack_inverse
from .simulator import ModelConfig, identity_model


def _codec(rng) -> float:
    ilp = init_ilp(20, 128, rng)
    chi = rng.normal(size=(1000, 20))
    return float(np.max(np.sum((decode(ilp, encode(ilp, chi)) - chi) ** 2, axis=1)))


def _stack(rng) -> float:
    pos = rng.uniform(size=(100, 2))
    graph = build_radius_graph(pos, 0.15)
    stack = init_stack(4, 16, 32, 2, rng, np.float64)
    x = LatentNodes(rng.normal(size=(100, 16)), rng.normal(size=(100, 16)))
    e = EdgeHalves(rng.normal(size=(graph.n_edges, 16)), rng.normal(size=(graph.n_edges, 16)))
    return stack_inverse(stack, stack_forward(stack, x, graph, e), graph, e).max_abs_diff(x)


def _graph(rng) -> bool:
    for _ in range(50):
        d = int(rng.integers(2, 4))
        pos = rng.uniform(size=(int(rng.integers(1, 200)), d))
        r = float(rng.uniform(0.02, 0.3))
        g = build_radius_graph(pos, r)
        if not np.array_equal(g.edges, brute_force_edges(pos, r).reshape(-1, 2)):
            return False
    return True


def _identity() -> float:
    model = identity_model(ModelConfig(precision="float64"), Normalizer.identity(2))
    pos = np.array([[0.25, 0.5], [0.5, 0.5], [0.75, 0.5]])
    state = StepState(pos, np.full((5, 3, 2), 0.25), np.zeros(3, np.int64), 10)
    return consistency_mse(model, state, 5)


def _ot(rng) -> bool:
    for _ in range(20):
        a, b = rng.uniform(size=(5, 2)), rng.uniform(size=(5, 2))
        if ot_distance(a, b) != ot_brute_force(a, b):
            return False
    return True


def run_selftest(seed: int = 0, echo=print) -> list[str]:
    """Run every check, print one line each, return the names of the failures."""
    rng = np.random.default_rng(seed)
    checks = [
        ("codec roundtrip", lambda: _codec(rng), lambda v: v < 1e-6),
        ("stack roundtrip", lambda: _stack(rng), lambda v: v <= 1e-11),
        ("cell list vs brute force", lambda: _graph(rng), bool),
        ("identity consistency", _identity, lambda v: v == 0.0),
        ("exact transport", lambda: _ot(rng), bool),
    ]
    failures = []
    for name, run, ok in checks:
        value = run()
        passed = ok(value)
        echo(f"{'PASS' if passed else 'FAIL'} {name}: {value}")
        if not passed:
            failures.append(name)
    return failures
