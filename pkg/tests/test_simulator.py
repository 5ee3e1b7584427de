import numpy as np
import pytest

from rgns.errors import ConfigurationError, RolloutDivergedError
from rgns.graph import Normalizer, assemble_node_features
from rgns.ilp import encode_edges
from rgns.particles import StepState
from rgns.rrmp import EdgeHalves, LatentNodes, stack_forward, stack_inverse
from rgns.simulator import (
    ModelConfig,
    conditioning,
    forward_step,
    goal_condition,
    identity_model,
    init_model,
    inverse_rollout,
    inverse_step,
    rollout,
)

# dyadic timestep, positions and velocities keep every position update exact
DT = 1.0 / 128


def cfg(**kw):
    base = dict(latent_dim=24, n_layers=2, hidden=16, precision="float64", dt=DT)
    base.update(kw)
    return ModelConfig(**base)


def translation_state(n=20, seed=0, v=(0.125, -0.25), k=5):
    rng = np.random.default_rng(seed)
    pos = rng.integers(256, 768, size=(n, 2)) / 1024.0
    win = np.broadcast_to(np.array(v), (k, n, 2)).copy()
    return StepState(pos, win, np.zeros(n, np.int64), 10)


def random_state(n=20, seed=0, k=5):
    rng = np.random.default_rng(seed)
    return StepState(rng.uniform(0.2, 0.8, (n, 2)), rng.normal(0, 0.3, (k, n, 2)), np.zeros(n, np.int64), 10)


def test_identity_model_extrapolates_constant_velocity():
    model = identity_model(cfg())
    s = random_state()
    nxt = forward_step(model, s)
    assert np.array_equal(nxt.vel_window[-1], s.vel_window[-1])
    assert np.array_equal(nxt.positions, s.positions + DT * s.vel_window[-1])
    res = rollout(model, s, 3)
    for j in range(4):
        assert np.allclose(res.frames[j].positions, s.positions + j * DT * s.vel_window[-1], atol=1e-15)


def test_position_identity_and_masking_random_model():
    model = init_model(cfg(), Normalizer(np.array([0.1, -0.1]), np.array([0.5, 0.7])), seed=3)
    s = random_state(seed=1)
    res = rollout(model, s, 6)
    for a, b in zip(res.frames, res.frames[1:]):
        assert np.array_equal(b.positions, a.positions + DT * b.vel_window[-1])
        assert np.array_equal(b.vel_window[:-1], a.vel_window[1:])
    back = inverse_rollout(model, res.last, 6)
    for a, b in zip(back.frames, back.frames[1:]):
        assert np.array_equal(b.positions, np.clip(a.positions - DT * a.vel_window[-1], 0, 1))
        assert np.array_equal(b.vel_window[1:], a.vel_window[:-1])


def test_isolated_particle_sees_only_itself():
    model = init_model(cfg(), Normalizer.identity(2), seed=4)
    s = random_state(n=1, seed=2)
    s.positions[:] = 0.5
    alone = forward_step(model, s)
    crowd = StepState(
        np.vstack([s.positions, [[0.1, 0.1], [0.12, 0.1], [0.9, 0.9]]]),
        np.concatenate([s.vel_window, np.ones((5, 3, 2))], axis=1),
        np.zeros(4, np.int64),
        10,
    )
    assert np.allclose(forward_step(model, crowd).vel_window[-1, 0], alone.vel_window[-1, 0], atol=1e-13)


def test_uniform_translation_inverse_recovers_exactly():
    model = identity_model(cfg())
    s = translation_state()
    fwd = forward_step(model, s)
    back = inverse_step(model, fwd)
    assert np.array_equal(back.positions, s.positions)
    assert np.array_equal(back.vel_window, s.vel_window)
    for k in (1, 10, 40):
        res = inverse_rollout(model, rollout(model, s, k).last, k)
        assert np.array_equal(res.last.positions, s.positions)


def test_identity_model_is_inexact_for_accelerating_windows():
    # the identity pipeline extrapolates the newest velocity forwards and the
    # oldest one backwards, so only constant windows round-trip
    model = identity_model(cfg())
    s = random_state(seed=5)
    back = inverse_step(model, forward_step(model, s))
    assert not np.array_equal(back.vel_window[0], s.vel_window[0])


def test_latent_roundtrip_for_random_parameters():
    model = init_model(cfg(), Normalizer.identity(2), seed=6)
    s = random_state(seed=6)
    c = model.config
    graph, geom = conditioning(model, s.positions)
    e1, e2, _ = encode_edges(model.edge_enc, geom)
    chi = assemble_node_features(s.vel_window, s.positions, s.materials, c.box, c.radius, model.normalizer)
    n, _ = model.codec.encode(chi)
    y = stack_forward(model.stack, LatentNodes.split(n), graph, EdgeHalves(e1, e2))
    back = stack_inverse(model.stack, y, graph, EdgeHalves(e1, e2)).join()
    chi_back, _ = model.codec.decode(back)
    assert np.abs(chi_back - chi).max() <= 1e-10


def test_wall_contact_stops_normal_motion():
    model = identity_model(cfg())
    s = StepState(np.array([[0.999, 0.5]]), np.broadcast_to([1.0, 0.5], (5, 1, 2)).copy(), np.zeros(1), 0)
    diag = []
    nxt = forward_step(model, s, diag)
    assert nxt.vel_window[-1].tolist() == [[0.0, 0.5]]
    assert nxt.positions[0, 0] == 0.999
    assert diag[0].wall_contacts == 1


def test_inverse_clips_and_flags():
    model = identity_model(cfg())
    s = StepState(np.array([[0.001, 0.5]]), np.broadcast_to([1.0, 0.0], (5, 1, 2)).copy(), np.zeros(1), 5)
    diag = []
    prev = inverse_step(model, s, diag)
    assert prev.positions[0, 0] == 0.0
    assert diag[0].wall_contacts == 1
    assert prev.time_index == 4


def test_single_step_rollout_equals_step():
    model = init_model(cfg(), Normalizer.identity(2), seed=7)
    s = random_state(seed=7)
    assert np.array_equal(rollout(model, s, 1).last.positions, forward_step(model, s).positions)
    assert np.array_equal(inverse_rollout(model, s, 1).last.positions, inverse_step(model, s).positions)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    model = init_model(cfg(), Normalizer.identity(2), seed=8)
    model.stack.layers[0].f_node.biases[-1][:] = np.inf
    with pytest.raises(RolloutDivergedError) as info:
        rollout(model, random_state(), 3)
    assert info.value.step == 10


def test_rollout_needs_steps():
    model = identity_model(cfg())
    with pytest.raises(ConfigurationError):
        rollout(model, random_state(), 0)
    with pytest.raises(ConfigurationError):
        inverse_rollout(model, random_state(), 0)


def test_state_shape_checked():
    model = identity_model(cfg())
    with pytest.raises(ConfigurationError):
        forward_step(model, random_state(k=3))


def test_goal_degenerate_and_identity():
    model = identity_model(cfg())
    target = translation_state()
    res = goal_condition(model, target, 0)
    assert res.consistency_mse == 0.0 and res.reproduced.last is target
    res = goal_condition(model, target, 7)
    assert res.consistency_mse == 0.0
    assert len(res.inverse.frames) == 8 and len(res.reproduced.frames) == 8


def test_shared_parameter_registry():
    model = init_model(cfg(), Normalizer.identity(2), seed=9)
    names = list(model.named_arrays())
    assert not any("forward" in n or "inverse" in n for n in names)
    assert len(names) == len(set(names))
    assert model.parameter_count() == sum(a.size for a in model.named_arrays().values())


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(latent_dim=14)  # C = 15 for k=5, D=2
    with pytest.raises(ConfigurationError):
        ModelConfig(latent_dim=33)
    with pytest.raises(ConfigurationError):
        ModelConfig(codec="fourier")
