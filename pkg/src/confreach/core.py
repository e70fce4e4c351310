"""Domain types, closed-interval arithmetic and the trajectory dataset format.

Intervals are closed, ``lo <= hi``, and may carry infinite endpoints.  All
operations are pure.  Outward rounding (one ulp per operation) is off by
default and can be switched on with :func:`outward_rounding`.
"""
from __future__ import annotations

import contextlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

POSITION_BOUNDS = (-1.2, 0.6)
VELOCITY_BOUNDS = (-0.07, 0.07)


class ToolkitError(Exception):
    """Base class for errors raised by this package."""


class InputError(ToolkitError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigurationError(ToolkitError, ValueError):
    """A controller, profile or pipeline configuration is malformed."""


class CoverageError(ToolkitError, LookupError):
    """A state falls outside every region of a partition."""


# ---------------------------------------------------------------------------
# rounding mode

_OUTWARD = False


def outward_enabled() -> bool:
    return _OUTWARD


@contextlib.contextmanager
def outward_rounding(enabled: bool = True) -> Iterator[None]:
    """Temporarily widen every interval result by one ulp on each side."""
    global _OUTWARD
    previous = _OUTWARD
    _OUTWARD = bool(enabled)
    try:
        yield
    finally:
        _OUTWARD = previous


def _down(x: float) -> float:
    return math.nextafter(x, -math.inf) if _OUTWARD else x


def _up(x: float) -> float:
    return math.nextafter(x, math.inf) if _OUTWARD else x


# ---------------------------------------------------------------------------
# intervals and boxes


@dataclass(frozen=True, slots=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise InputError(f"invalid interval [{self.lo}, {self.hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, x: float) -> Interval:
        return cls(x, x)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def subset_of(self, other: Interval) -> bool:
        return other.lo <= self.lo and self.hi <= other.hi

    def as_list(self) -> list[float]:
        return [self.lo, self.hi]


@dataclass(frozen=True, slots=True)
class BoxSet:
    position: Interval
    velocity: Interval

    @classmethod
    def from_bounds(cls, pl: float, ph: float, vl: float, vh: float) -> BoxSet:
        return cls(Interval(pl, ph), Interval(vl, vh))

    @classmethod
    def point(cls, p: float, v: float) -> BoxSet:
        return cls(Interval.point(p), Interval.point(v))

    def contains_state(self, p: float, v: float) -> bool:
        return self.position.contains(p) and self.velocity.contains(v)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.position.lo, self.position.hi, self.velocity.lo, self.velocity.hi)

    def to_json(self) -> dict:
        return {"p": self.position.as_list(), "v": self.velocity.as_list()}

    @classmethod
    def from_json(cls, obj: dict) -> BoxSet:
        return cls(Interval(*obj["p"]), Interval(*obj["v"]))


def interval_add(a: Interval, b: Interval) -> Interval:
    return Interval(_down(a.lo + b.lo), _up(a.hi + b.hi))


def interval_scale(a: Interval, c: float) -> Interval:
    if c >= 0:
        lo, hi = c * a.lo, c * a.hi
    else:
        lo, hi = c * a.hi, c * a.lo
    # 0 * inf is nan; the image of anything under 0 is {0}
    if c == 0:
        lo = hi = 0.0
    return Interval(_down(lo), _up(hi))


def interval_cos(a: Interval) -> Interval:
    """Tight enclosure of ``cos`` over ``a``.

    Endpoint values are widened to +1 (resp. -1) when an even (resp. odd)
    multiple of pi lies inside the argument.
    """
    if not (math.isfinite(a.lo) and math.isfinite(a.hi)) or a.hi - a.lo >= 2 * math.pi:
        return Interval(-1.0, 1.0)
    c_lo, c_hi = math.cos(a.lo), math.cos(a.hi)
    lo, hi = min(c_lo, c_hi), max(c_lo, c_hi)
    k = math.ceil(a.lo / math.pi)
    while k * math.pi <= a.hi:
        if k % 2 == 0:
            hi = 1.0
        else:
            lo = -1.0
        k += 1
    return Interval(max(-1.0, _down(lo)), min(1.0, _up(hi)))


def interval_hull(a: Interval, b: Interval) -> Interval:
    return Interval(min(a.lo, b.lo), max(a.hi, b.hi))


def interval_clamp(a: Interval, bounds: Interval) -> Interval:
    """Image of ``clamp(x, bounds)`` over ``x`` in ``a``."""
    return Interval(min(max(a.lo, bounds.lo), bounds.hi), min(max(a.hi, bounds.lo), bounds.hi))


def box_contains(outer: BoxSet, inner: BoxSet) -> bool:
    return inner.position.subset_of(outer.position) and inner.velocity.subset_of(outer.velocity)


def box_hull(boxes: Sequence[BoxSet]) -> BoxSet:
    if not boxes:
        raise InputError("hull of an empty box collection")
    return BoxSet.from_bounds(
        min(b.position.lo for b in boxes),
        max(b.position.hi for b in boxes),
        min(b.velocity.lo for b in boxes),
        max(b.velocity.hi for b in boxes),
    )


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, slots=True)
class State:
    position: float
    velocity: float

    def __post_init__(self):
        if not (POSITION_BOUNDS[0] <= self.position <= POSITION_BOUNDS[1]):
            raise InputError(f"position {self.position} outside {POSITION_BOUNDS}")
        if not (VELOCITY_BOUNDS[0] <= self.velocity <= VELOCITY_BOUNDS[1]):
            raise InputError(f"velocity {self.velocity} outside {VELOCITY_BOUNDS}")


@dataclass(frozen=True, slots=True)
class Step:
    time: int
    state: State
    measurement: float
    control: float

    @property
    def error(self) -> float:
        return abs(self.measurement - self.state.position)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A closed-loop rollout stored column-wise.

    ``position[k], velocity[k]`` is the state at step ``k``; ``measurement[k]``
    and ``control[k]`` are the perception output and control computed there.
    """

    position: np.ndarray
    velocity: np.ndarray
    measurement: np.ndarray
    control: np.ndarray
    terminated_at_goal: bool = False

    def __post_init__(self):
        cols = [_frozen(getattr(self, n)) for n in ("position", "velocity", "measurement", "control")]
        if len({len(c) for c in cols}) != 1 or len(cols[0]) == 0:
            raise InputError("trajectory columns must be nonempty and of equal length")
        for name, col in zip(("position", "velocity", "measurement", "control"), cols):
            object.__setattr__(self, name, col)

    def __len__(self) -> int:
        return len(self.position)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.terminated_at_goal == other.terminated_at_goal and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("position", "velocity", "measurement", "control")
        )

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.measurement - self.position)

    @property
    def steps(self) -> list[Step]:
        return [
            Step(k, State(float(p), float(v)), float(y), float(u))
            for k, (p, v, y, u) in enumerate(zip(self.position, self.velocity, self.measurement, self.control))
        ]

    @classmethod
    def from_steps(cls, steps: Sequence[Step], terminated_at_goal: bool = False) -> Trajectory:
        for k, s in enumerate(steps):
            if s.time != k:
                raise InputError("step times must be consecutive integers starting at 0")
        return cls(
            [s.state.position for s in steps],
            [s.state.velocity for s in steps],
            [s.measurement for s in steps],
            [s.control for s in steps],
            terminated_at_goal,
        )


@dataclass(frozen=True)
class FlatData:
    """Every realized step of a dataset in concatenated columns."""

    position: np.ndarray
    velocity: np.ndarray
    error: np.ndarray
    traj: np.ndarray
    time: np.ndarray
    n_traj: int


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    horizon: int
    seed: int | None = None
    goal_position: float = 0.45
    _flat: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if self.horizon < 0:
            raise InputError("horizon must be >= 0")
        for tr in self.trajectories:
            if len(tr) > self.horizon + 1:
                raise InputError(f"trajectory of length {len(tr)} exceeds horizon {self.horizon}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.seed == other.seed
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    def subset(self, indices: Sequence[int]) -> Dataset:
        return Dataset(
            tuple(self.trajectories[i] for i in indices), self.horizon, self.seed, self.goal_position
        )

    def flat(self) -> FlatData:
        if not self._flat:
            lengths = [len(t) for t in self.trajectories]
            if self.trajectories:
                pos = np.concatenate([t.position for t in self.trajectories])
                vel = np.concatenate([t.velocity for t in self.trajectories])
                err = np.concatenate([t.errors for t in self.trajectories])
            else:
                pos = vel = err = np.zeros(0)
            traj = np.repeat(np.arange(len(lengths), dtype=np.int64), lengths)
            time = np.concatenate([np.arange(n, dtype=np.int64) for n in lengths]) if lengths else np.zeros(0, np.int64)
            for a in (pos, vel, err, traj, time):
                a.setflags(write=False)
            self._flat.append(FlatData(pos, vel, err, traj, time, len(lengths)))
        return self._flat[0]

    # -- serialization ----------------------------------------------------

    def to_json(self) -> str:
        head = {"horizon": self.horizon, "seed": self.seed, "goal_position": self.goal_position}
        parts = [json.dumps(head, sort_keys=True)[:-1], ', "trajectories": [']
        for j, tr in enumerate(self.trajectories):
            if j:
                parts.append(", ")
            parts.append("[")
            parts.append(
                ", ".join(
                    f'{{"t": {k}, "p": {_g17(p)}, "v": {_g17(v)}, "y": {_g17(y)}, "u": {_g17(u)}}}'
                    for k, (p, v, y, u) in enumerate(zip(tr.position, tr.velocity, tr.measurement, tr.control))
                )
            )
            parts.append("]")
        parts.append("]}\n")
        return "".join(parts)

    @classmethod
    def from_json(cls, text: str) -> Dataset:
        obj = json.loads(text)
        goal = obj.get("goal_position", 0.45)
        horizon = int(obj["horizon"])
        trajs = []
        for rows in obj["trajectories"]:
            if [r["t"] for r in rows] != list(range(len(rows))):
                raise InputError("step times must be consecutive integers starting at 0")
            p = [r["p"] for r in rows]
            trajs.append(
                Trajectory(p, [r["v"] for r in rows], [r["y"] for r in rows], [r["u"] for r in rows], p[-1] >= goal)
            )
        return cls(tuple(trajs), horizon, obj.get("seed"), goal)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> Dataset:
        return cls.from_json(Path(path).read_text())


def _g17(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise InputError("non-finite value in dataset")
    return format(x, ".17g")


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
