"""Mountain-car plant, controllers, the perception-noise model and rollouts.

The closed loop is

    y_k = p_k + a(p_k) * zeta_k,   u_k = h(y_k, v_k),   (p, v)_{k+1} = f(p_k, v_k, u_k)

where ``a`` is a piecewise-linear amplitude over position and ``zeta`` is
drawn from a bounded distribution on ``[-1, 1]``.  The controller sees the
perceived position and the true velocity.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import kernels
from .core import (
    BoxSet,
    ConfigurationError,
    Dataset,
    InputError,
    Interval,
    State,
    Trajectory,
    interval_add,
    interval_clamp,
    interval_cos,
    interval_scale,
    outward_enabled,
)


@dataclass(frozen=True)
class MountainCarParams:
    power: float = 0.0015
    gravity: float = 0.0025
    frequency: float = 3.0
    goal_position: float = 0.45
    position_bounds: Interval = Interval(-1.2, 0.6)
    velocity_bounds: Interval = Interval(-0.07, 0.07)
    # new-velocity position update (the common simulator); default uses the old velocity
    gym_ordering: bool = False

    def __post_init__(self):
        if min(self.power, self.gravity, self.frequency) <= 0:
            raise ConfigurationError("power, gravity and frequency must be positive")
        if not self.position_bounds.contains(self.goal_position):
            raise ConfigurationError("goal position outside position bounds")

    def as_tuple(self) -> tuple:
        return (
            self.power,
            self.gravity,
            self.frequency,
            self.goal_position,
            self.position_bounds.lo,
            self.position_bounds.hi,
            self.velocity_bounds.lo,
            self.velocity_bounds.hi,
        )

    def to_json(self) -> dict:
        return {
            "power": self.power,
            "gravity": self.gravity,
            "frequency": self.frequency,
            "goal_position": self.goal_position,
            "position_bounds": self.position_bounds.as_list(),
            "velocity_bounds": self.velocity_bounds.as_list(),
            "gym_ordering": self.gym_ordering,
        }

    @classmethod
    def from_json(cls, obj: dict) -> MountainCarParams:
        obj = dict(obj)
        for key in ("position_bounds", "velocity_bounds"):
            if key in obj:
                obj[key] = Interval(*obj[key])
        return cls(**obj)


# ---------------------------------------------------------------------------
# dynamics


def dynamics_step(state: State, control: float, params: MountainCarParams = MountainCarParams()) -> State:
    """Advance the plant by one step.

    ``v' = clamp(v + power*u - gravity*cos(frequency*p))`` and ``p' = clamp(p + v)``
    (``p + v'`` with ``gym_ordering``).  Hitting the left wall zeroes a
    negative velocity.
    """
    if not -1.0 <= control <= 1.0:
        raise InputError(f"control {control} outside [-1, 1]")
    p, v = kernels.dynamics_step(state.position, state.velocity, control, params.as_tuple(), params.gym_ordering)
    return State(p, v)


def dynamics_step_interval(box: BoxSet, control: Interval, params: MountainCarParams = MountainCarParams()) -> BoxSet:
    """Interval image of :func:`dynamics_step` over ``box x control``."""
    if control.lo < -1.0 or control.hi > 1.0:
        raise InputError(f"control interval {control} not inside [-1, 1]")
    p, v = box.position, box.velocity
    v_raw = interval_add(
        interval_add(v, interval_scale(control, params.power)),
        interval_scale(interval_cos(interval_scale(p, params.frequency)), -params.gravity),
    )
    v_new = interval_clamp(v_raw, params.velocity_bounds)
    p_raw = interval_add(p, v_new if params.gym_ordering else v)
    pmin = params.position_bounds.lo
    if p_raw.lo <= pmin:
        # states that hit the wall lose any negative velocity
        lo, hi = v_new.lo, v_new.hi
        if p_raw.hi <= pmin:
            lo = lo if lo > 0.0 else 0.0
        hi = hi if hi > 0.0 else 0.0
        v_new = Interval(lo, hi)
    return BoxSet(interval_clamp(p_raw, params.position_bounds), v_new)


# ---------------------------------------------------------------------------
# controllers


@dataclass(frozen=True)
class EnergyController:
    """Bang-bang energy pumping: push in the direction of motion."""

    thrust: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.thrust <= 1.0:
            raise ConfigurationError("thrust must lie in (0, 1]")

    @property
    def pack(self) -> tuple:
        return (kernels.KIND_ENERGY, (), (), (), 1.0, 0.0, float(self.thrust))

    def to_json(self) -> dict:
        return {"type": "energy", "thrust": self.thrust}


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, ndmin=2)
        b = np.array(self.bias, dtype=np.float64, ndmin=1)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ConfigurationError(f"bias of shape {b.shape} does not match weight of shape {w.shape}")
        if self.activation not in kernels.ACT_CODES:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class MlpController:
    """Feed-forward network on ``(measured position, velocity)``.

    Output is ``clip(output_scale * net(y, v) + output_shift, -1, 1)``.
    """

    layers: tuple[Layer, ...]
    output_scale: float = 1.0
    output_shift: float = 0.0
    _pack: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(l if isinstance(l, Layer) else Layer(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConfigurationError("controller needs at least one layer")
        n_in = 2
        for i, layer in enumerate(layers):
            if layer.weight.shape[1] != n_in:
                raise ConfigurationError(f"layer {i} expects {layer.weight.shape[1]} inputs, previous layer gives {n_in}")
            n_in = layer.weight.shape[0]
        if n_in != 1:
            raise ConfigurationError(f"final layer must have one output, has {n_in}")

    @property
    def pack(self) -> tuple:
        if not self._pack:
            dims = (2,) + tuple(l.weight.shape[0] for l in self.layers)
            theta = np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])
            acts = tuple(kernels.ACT_CODES[l.activation] for l in self.layers)
            self._pack.append(
                (kernels.KIND_MLP, dims, acts, tuple(float(x) for x in theta),
                 float(self.output_scale), float(self.output_shift), 1.0)
            )
        return self._pack[0]

    def to_json(self) -> dict:
        return {
            "layers": [
                {"w": l.weight.tolist(), "b": l.bias.tolist(), "act": "id" if l.activation == "identity" else l.activation}
                for l in self.layers
            ],
            "scale": self.output_scale,
            "shift": self.output_shift,
        }

    @classmethod
    def from_json(cls, obj: dict) -> MlpController:
        try:
            layers = tuple(Layer(l["w"], l["b"], l.get("act", "id")) for l in obj["layers"])
            return cls(layers, float(obj.get("scale", 1.0)), float(obj.get("shift", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed controller weights: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> MlpController:
        return cls.from_json(json.loads(Path(path).read_text()))


Controller = Union[MlpController, EnergyController]

# u = tanh(velocity_gain * v + position_gain * (y - reference)); saturates
# away from velocity reversals, so perception error matters only near them.
DEFAULT_VELOCITY_GAIN = 3000.0
DEFAULT_POSITION_GAIN = 0.1
DEFAULT_POSITION_REFERENCE = -0.5


def default_controller(
    velocity_gain: float = DEFAULT_VELOCITY_GAIN,
    position_gain: float = DEFAULT_POSITION_GAIN,
    reference: float = DEFAULT_POSITION_REFERENCE,
) -> MlpController:
    """Smooth energy-pumping policy written as a one-layer tanh network."""
    return MlpController((Layer([[position_gain, velocity_gain]], [-position_gain * reference], "tanh"),))


def controller_eval(ctrl: Controller, measurement: float, velocity: float) -> float:
    if not (math.isfinite(measurement) and math.isfinite(velocity)):
        raise InputError("controller inputs must be finite")
    return kernels.controller_eval(ctrl.pack, measurement, velocity)


def controller_eval_interval(ctrl: Controller, measurement: Interval, velocity: Interval) -> Interval:
    lo, hi = kernels.controller_eval_interval(
        ctrl.pack, measurement.lo, measurement.hi, velocity.lo, velocity.hi, outward_enabled()
    )
    return Interval(lo, hi)


def controller_from_json(obj: dict, base_dir: str | os.PathLike | None = None) -> Controller:
    """Build a controller from a config entry.

    Accepts ``{"type": "energy", "thrust": ...}``, ``{"type": "default", ...gains}``,
    ``{"type": "mlp", "path": ...}`` or an inline weight document.
    """
    kind = obj.get("type", "mlp" if "layers" in obj else "default")
    if kind == "energy":
        return EnergyController(float(obj.get("thrust", 1.0)))
    if kind == "default":
        return default_controller(
            float(obj.get("velocity_gain", DEFAULT_VELOCITY_GAIN)),
            float(obj.get("position_gain", DEFAULT_POSITION_GAIN)),
            float(obj.get("reference", DEFAULT_POSITION_REFERENCE)),
        )
    if kind == "mlp":
        if "path" in obj:
            path = Path(obj["path"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return MlpController.load(path)
        return MlpController.from_json(obj)
    raise ConfigurationError(f"unknown controller type {kind!r}")


def controller_to_json(ctrl: Controller) -> dict:
    if isinstance(ctrl, EnergyController):
        return ctrl.to_json()
    return {"type": "mlp", **ctrl.to_json()}


# ---------------------------------------------------------------------------
# perception noise

DEFAULT_BREAKPOINTS = ((-1.2, 0.15), (-0.6, 0.15), (-0.3, 0.05), (0.0, 0.02), (0.6, 0.02))


@dataclass(frozen=True)
class NoiseProfile:
    """Position-dependent perception error amplitude."""

    breakpoints: tuple[tuple[float, float], ...] = DEFAULT_BREAKPOINTS
    distribution: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        bps = tuple((float(x), float(a)) for x, a in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        xs = [x for x, _ in bps]
        if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigurationError("breakpoint positions must be strictly increasing (at least two)")
        if xs[0] > -1.2 or xs[-1] < 0.6:
            raise ConfigurationError("breakpoints must span [-1.2, 0.6]")
        if any(a < 0 for _, a in bps):
            raise ConfigurationError("amplitudes must be non-negative")
        if self.distribution not in ("uniform", "truncated_gaussian"):
            raise ConfigurationError(f"unknown noise distribution {self.distribution!r}")

    @property
    def xs(self) -> tuple[float, ...]:
        return tuple(x for x, _ in self.breakpoints)

    @property
    def amplitudes(self) -> tuple[float, ...]:
        return tuple(a for _, a in self.breakpoints)

    def amplitude(self, position: float) -> float:
        return kernels.noise_amplitude(position, self.xs, self.amplitudes)

    def sample_unit(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` standardized noise values supported on [-1, 1]."""
        if self.distribution == "uniform":
            return rng.uniform(-1.0, 1.0, size)
        # sigma = 1/3, truncated at +-3 sigma, by rejection
        out = np.empty(size)
        filled = 0
        while filled < size:
            draw = rng.normal(0.0, 1.0 / 3.0, 2 * (size - filled) + 8)
            draw = draw[np.abs(draw) <= 1.0][: size - filled]
            out[filled : filled + len(draw)] = draw
            filled += len(draw)
        return out

    @classmethod
    def constant(cls, amplitude: float, distribution: str = "uniform") -> NoiseProfile:
        return cls(((-1.2, amplitude), (0.6, amplitude)), distribution)

    def to_json(self) -> dict:
        return {"breakpoints": [list(b) for b in self.breakpoints], "distribution": self.distribution, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> NoiseProfile:
        return cls(tuple(tuple(b) for b in obj.get("breakpoints", DEFAULT_BREAKPOINTS)),
                   obj.get("distribution", "uniform"), int(obj.get("seed", 0)))


def perceive(state: State, profile: NoiseProfile, rng: np.random.Generator) -> float:
    zeta = float(profile.sample_unit(rng, 1)[0])
    return state.position + profile.amplitude(state.position) * zeta


# ---------------------------------------------------------------------------
# rollouts


def simulate(
    initial: State,
    ctrl: Controller,
    profile: NoiseProfile,
    params: MountainCarParams,
    horizon: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll the closed loop for at most ``horizon`` steps, stopping at the goal."""
    if horizon < 0:
        raise InputError("horizon must be >= 0")
    zeta = profile.sample_unit(rng, horizon + 1)
    p, v, y, u, done = kernels.rollout(
        initial.position, initial.velocity, zeta, profile.xs, profile.amplitudes,
        ctrl.pack, params.as_tuple(), horizon, params.gym_ordering,
    )
    return Trajectory(p, v, y, u, bool(done))


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(
    n: int,
    initial_set: Interval,
    ctrl: Controller,
    profile: NoiseProfile,
    params: MountainCarParams,
    horizon: int,
    seed: int,
) -> Dataset:
    """``n`` IID rollouts from rest with ``p0 ~ Uniform(initial_set)``."""
    if n < 1:
        raise InputError("n must be >= 1")
    trajs = []
    for j in range(n):
        rng = trajectory_rng(seed, j)
        p0 = float(rng.uniform(initial_set.lo, initial_set.hi))
        trajs.append(simulate(State(p0, 0.0), ctrl, profile, params, horizon, rng))
    return Dataset(tuple(trajs), horizon, seed, params.goal_position)


def replay_states(traj: Trajectory, params: MountainCarParams) -> list[tuple[float, float]]:
    """Re-apply the dynamics to recorded (state, control) pairs."""
    out = []
    for k in range(len(traj) - 1):
        s = dynamics_step(State(float(traj.position[k]), float(traj.velocity[k])), float(traj.control[k]), params)
        out.append((s.position, s.velocity))
    return out
