import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confreach.core import BoxSet, ConfigurationError, InputError, Interval, State
from confreach.system import (
    EnergyController,
    Layer,
    MlpController,
    MountainCarParams,
    NoiseProfile,
    controller_eval,
    controller_eval_interval,
    controller_from_json,
    controller_to_json,
    default_controller,
    dynamics_step,
    dynamics_step_interval,
    generate_dataset,
    perceive,
    replay_states,
    simulate,
)

import oracles

PARAMS = MountainCarParams()


def test_dynamics_examples():
    s = dynamics_step(State(-0.5, 0.0), 1.0)
    assert s.velocity == pytest.approx(0.0015 - 0.0025 * math.cos(-1.5), abs=1e-15)
    assert s.velocity == pytest.approx(0.0013232, abs=1e-7)
    assert s.position == -0.5
    eq = dynamics_step(State(math.pi / 6, 0.0), 0.0)
    assert eq.velocity == pytest.approx(0.0, abs=1e-18) and eq.position == math.pi / 6
    assert dynamics_step(State(-0.5, 0.07), 1.0).velocity <= 0.07


def test_dynamics_rejects_bad_control():
    with pytest.raises(InputError):
        dynamics_step(State(-0.5, 0.0), 1.5)


@given(st.floats(-1.2, 0.6), st.floats(-0.07, 0.07), st.floats(-1, 1), st.booleans())
def test_dynamics_matches_oracle(p, v, u, gym):
    params = MountainCarParams(gym_ordering=gym)
    s = dynamics_step(State(p, v), u, params)
    pe, ve = oracles.mountain_car(p, v, u, gym)
    assert s.position == pytest.approx(pe, abs=1e-15)
    assert s.velocity == pytest.approx(ve, abs=1e-15)


def test_left_wall_zeroes_velocity():
    s = dynamics_step(State(-1.19, -0.05), -1.0)
    assert s.position == -1.2 and s.velocity == 0.0


def test_dynamics_interval_example():
    # the velocity interval is the image of cos(3p) over p in [-0.51, -0.49];
    # checked against dense sampling rather than a hand-copied number
    box = BoxSet(Interval(-0.51, -0.49), Interval(0.0, 0.0))
    out = dynamics_step_interval(box, Interval(1.0, 1.0))
    assert out.position == Interval(-0.51, -0.49)
    vs = [dynamics_step(State(p, 0.0), 1.0).velocity for p in np.linspace(-0.51, -0.49, 10001)]
    assert out.velocity.lo == pytest.approx(min(vs), abs=1e-15)
    assert out.velocity.hi == pytest.approx(max(vs), abs=1e-15)
    assert out.velocity.lo == pytest.approx(0.0012484, abs=1e-7)
    assert out.velocity.hi == pytest.approx(0.0013980, abs=1e-7)


@given(st.floats(-1.2, 0.6), st.floats(0, 0.3), st.floats(-0.07, 0.07), st.floats(0, 0.03))
def test_dynamics_interval_point_and_control_hull(p, dp, v, dv):
    box = BoxSet(Interval(p, min(p + dp, 0.6)), Interval(v, min(v + dv, 0.07)))
    both = dynamics_step_interval(box, Interval(-1, 1))
    for u in (-1.0, 1.0):
        one = dynamics_step_interval(box, Interval(u, u))
        assert one.position.subset_of(both.position) and one.velocity.subset_of(both.velocity)
    point = dynamics_step_interval(BoxSet.point(p, v), Interval(0.3, 0.3))
    s = dynamics_step(State(p, v), 0.3)
    assert point == BoxSet.point(s.position, s.velocity)


def test_reference_interval_matches_kernel():
    from confreach import kernels

    rng = np.random.default_rng(0)
    for _ in range(1000):
        pl, ph = sorted(rng.uniform(-1.25, 0.65, 2))
        vl, vh = sorted(rng.uniform(-0.075, 0.075, 2))
        ul, uh = sorted(rng.uniform(-1, 1, 2))
        ref = dynamics_step_interval(BoxSet.from_bounds(pl, ph, vl, vh), Interval(ul, uh))
        assert ref.as_tuple() == kernels.dynamics_step_interval(pl, ph, vl, vh, ul, uh, PARAMS.as_tuple(), False)


def test_energy_controller():
    c = EnergyController(1.0)
    assert controller_eval(c, 0.0, 0.01) == 1.0
    assert controller_eval(c, 0.0, 0.0) == 1.0
    assert controller_eval(c, 0.0, -0.01) == -1.0
    assert controller_eval_interval(c, Interval(0, 0), Interval(-0.01, 0.02)) == Interval(-1, 1)
    with pytest.raises(ConfigurationError):
        EnergyController(0.0)


def test_single_layer_tanh_mlp():
    c = MlpController((Layer([[1.0, 0.0]], [0.0], "tanh"),))
    for y in (-1.0, -0.3, 0.2):
        assert controller_eval(c, y, 0.05) == pytest.approx(math.tanh(y), abs=1e-16)


def test_mlp_shape_validation():
    with pytest.raises(ConfigurationError):
        MlpController((Layer([[1.0, 0.0, 0.0]], [0.0], "tanh"),))
    with pytest.raises(ConfigurationError):
        MlpController((Layer(np.ones((3, 2)), np.zeros(3), "tanh"),))
    with pytest.raises(ConfigurationError):
        Layer([[1.0, 0.0]], [0.0, 1.0], "tanh")
    with pytest.raises(ConfigurationError):
        Layer([[1.0, 0.0]], [0.0], "softplus")


def _random_sigmoid_net(rng):
    layers = [
        Layer(rng.normal(0, 1, (16, 2)) * [5, 50], rng.normal(0, 1, 16), "sigmoid"),
        Layer(rng.normal(0, 1, (16, 16)), rng.normal(0, 1, 16), "sigmoid"),
        Layer(rng.normal(0, 1, (1, 16)), rng.normal(0, 1, 1), "tanh"),
    ]
    return MlpController(tuple(layers))


def test_mlp_matches_numpy_forward():
    rng = np.random.default_rng(4)
    c = _random_sigmoid_net(rng)
    spec = [(l.weight, l.bias, l.activation) for l in c.layers]
    for _ in range(200):
        y, v = rng.uniform(-1.2, 0.6), rng.uniform(-0.07, 0.07)
        assert controller_eval(c, y, v) == pytest.approx(oracles.mlp_forward(spec, y, v), abs=1e-12)


def test_mlp_interval_enclosure_statistical():
    rng = np.random.default_rng(5)
    c = _random_sigmoid_net(rng)
    for _ in range(5):
        yl, yh = sorted(rng.uniform(-1.2, 0.6, 2))
        vl, vh = sorted(rng.uniform(-0.07, 0.07, 2))
        out = controller_eval_interval(c, Interval(yl, yh), Interval(vl, vh))
        for y, v in zip(rng.uniform(yl, yh, 2000), rng.uniform(vl, vh, 2000)):
            assert out.contains(controller_eval(c, y, v))


def test_controller_json_round_trip(tmp_path):
    c = default_controller()
    doc = controller_to_json(c)
    back = controller_from_json(doc)
    assert back.pack == c.pack
    path = tmp_path / "w.json"
    path.write_text(json.dumps(c.to_json()))
    assert controller_from_json({"type": "mlp", "path": "w.json"}, tmp_path).pack == c.pack
    assert controller_from_json({"type": "energy", "thrust": 0.5}) == EnergyController(0.5)
    with pytest.raises(ConfigurationError):
        controller_from_json({"type": "pid"})


def test_noise_profile_validation():
    with pytest.raises(ConfigurationError):
        NoiseProfile(((-1.2, 0.1), (0.0, 0.1)))
    with pytest.raises(ConfigurationError):
        NoiseProfile(((-1.2, 0.1), (-1.2, 0.1), (0.6, 0.1)))
    with pytest.raises(ConfigurationError):
        NoiseProfile(((-1.2, -0.1), (0.6, 0.1)))
    with pytest.raises(ConfigurationError):
        NoiseProfile(distribution="cauchy")


def test_default_profile_amplitudes():
    prof = NoiseProfile()
    assert prof.amplitude(-1.0) == 0.15
    assert prof.amplitude(0.4) == 0.02
    assert prof.amplitude(-0.45) == pytest.approx(0.10)
    rng = np.random.default_rng(0)
    for p in (-1.0, 0.4):
        for _ in range(2000):
            assert abs(perceive(State(p, 0.0), prof, rng) - p) <= prof.amplitude(p)


@pytest.mark.parametrize("dist", ["uniform", "truncated_gaussian"])
def test_unit_noise_support(dist):
    z = NoiseProfile(distribution=dist).sample_unit(np.random.default_rng(1), 20000)
    assert np.all(np.abs(z) <= 1.0)
    if dist == "truncated_gaussian":
        assert np.std(z) == pytest.approx(1 / 3, rel=0.05)


def test_zero_noise_exact_measurement():
    prof = NoiseProfile.constant(0.0)
    assert perceive(State(-0.3, 0.01), prof, np.random.default_rng(0)) == -0.3


def test_energy_controller_reaches_goal_without_noise():
    tr = simulate(State(-0.5, 0.0), EnergyController(), NoiseProfile.constant(0.0), PARAMS, 200, np.random.default_rng(0))
    assert tr.terminated_at_goal and len(tr) < 201
    assert tr.position[-1] >= 0.45


def test_horizon_zero():
    tr = simulate(State(-0.5, 0.0), default_controller(), NoiseProfile(), PARAMS, 0, np.random.default_rng(0))
    assert len(tr) == 1 and tr.position[0] == -0.5


def test_generation_is_deterministic():
    args = (25, Interval(-0.55, -0.45), default_controller(), NoiseProfile(), PARAMS, 90)
    a, b = generate_dataset(*args, seed=3), generate_dataset(*args, seed=3)
    assert a == b and a.to_json() == b.to_json()
    c = generate_dataset(*args, seed=4)
    assert a.trajectories[0] != c.trajectories[0]
    assert len(generate_dataset(1, *args[1:], seed=0)) == 1


def test_replay_reproduces_states(small_data):
    for tr in small_data.trajectories[:50]:
        replayed = replay_states(tr, PARAMS)
        for k, (p, v) in enumerate(replayed):
            assert p == tr.position[k + 1] and v == tr.velocity[k + 1]
        assert np.all(np.abs(tr.control) <= 1.0)
        assert np.all(tr.velocity[0] == 0.0)


def test_initial_positions_in_set(small_data):
    p0 = np.array([t.position[0] for t in small_data])
    assert np.all((p0 >= -0.55) & (p0 <= -0.45))


def test_default_controller_mostly_reaches_goal(desk_data):
    done = np.mean([t.terminated_at_goal for t in desk_data])
    assert done > 0.5
