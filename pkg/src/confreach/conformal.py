"""Conformal quantiles and perception-error bound functions.

Two kinds of bound are fitted here:

* :class:`EtaFunction` -- a piecewise-constant bound over a position
  partition.  Each region gets the conformal quantile, at level
  ``1 - alpha/M``, of the per-trajectory maximum error observed inside it,
  so a union bound over the ``M`` regions gives trajectory-wide coverage
  ``1 - alpha``.
* :class:`TimeBoundFunction` -- a per-time-step baseline obtained by
  normalizing errors with a per-step scale and calibrating the maximum
  normalized error.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import kernels
from .core import BoxSet, CoverageError, Dataset, InputError, State
from .partition import Partition

NORMALIZER_FLOOR = 1e-6

# (N+1)*level is computed in floating point; an exact integer product can land
# a hair above the integer and would otherwise bump the rank by one.
_RANK_SLACK = 1e-9


def conformal_rank(n: int, level: float) -> int:
    """1-based rank ``ceil((n+1) * level)`` of the conformal quantile."""
    return max(1, math.ceil((n + 1) * level - _RANK_SLACK))


def conformal_quantile(scores: Sequence[float], level: float) -> float:
    """The normalized ``level`` quantile of finite ``scores``.

    Sorts the scores ascending and returns the ``ceil((N+1) * level)``-th
    one; when that rank exceeds ``N`` the implicit ``+inf`` sentinel is
    returned.
    """
    z = np.asarray(scores, dtype=np.float64).ravel()
    if z.size == 0:
        raise InputError("conformal_quantile needs at least one score")
    if not 0.0 < level < 1.0:
        raise InputError(f"level {level} outside (0, 1)")
    if not np.all(np.isfinite(z)):
        raise InputError("pass finite scores only; the +inf sentinel is implicit")
    r = conformal_rank(z.size, level)
    if r > z.size:
        return math.inf
    return float(np.partition(z, r - 1)[r - 1])


@dataclass(frozen=True)
class ScoreSet:
    """Sub-trajectory maxima for one region plus the ``+inf`` sentinel."""

    region_index: int
    scores: tuple[float, ...]

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if sum(math.isinf(s) for s in scores) != 1:
            raise InputError("a score set carries exactly one +inf sentinel")
        if any(s < 0 for s in scores if math.isfinite(s)):
            raise InputError("scores must be non-negative")
        object.__setattr__(self, "scores", scores)

    @property
    def finite(self) -> tuple[float, ...]:
        return tuple(s for s in self.scores if math.isfinite(s))


def _in_region(p: np.ndarray, v: np.ndarray, region: BoxSet, upper_closed: bool) -> np.ndarray:
    hi_ok = p <= region.position.hi if upper_closed else p < region.position.hi
    return (p >= region.position.lo) & hi_ok & (v >= region.velocity.lo) & (v <= region.velocity.hi)


def subtrajectory_scores(dataset: Dataset, region: BoxSet, *, index: int = 0, upper_closed: bool = True) -> ScoreSet:
    """Maximum perception error of each trajectory while inside ``region``.

    Trajectories that never enter the region contribute no score.  With
    ``upper_closed=False`` the region's upper position edge is excluded,
    which is how partition regions other than the last are defined.
    """
    scores = []
    for tr in dataset:
        inside = _in_region(tr.position, tr.velocity, region, upper_closed)
        if inside.any():
            scores.append(float(tr.errors[inside].max()))
    return ScoreSet(index, tuple(scores) + (math.inf,))


# ---------------------------------------------------------------------------
# bound functions


@dataclass(frozen=True)
class EtaFunction:
    partition: Partition
    bounds: tuple[float, ...]
    confidence: float

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.bounds)
        if len(bounds) != self.partition.m:
            raise InputError(f"{len(bounds)} bounds for {self.partition.m} regions")
        if any(not (b >= 0) for b in bounds):
            raise InputError("bounds must be >= 0 or +inf")
        if not 0.0 < self.confidence < 1.0:
            raise InputError("alpha must lie in (0, 1)")
        object.__setattr__(self, "bounds", bounds)

    @property
    def alpha(self) -> float:
        return self.confidence

    def region_of(self, position: float) -> int:
        return self.partition.region_of(position)

    def __call__(self, state: State | float) -> float:
        return eta_eval(self, state)

    def bound_array(self, positions: np.ndarray) -> np.ndarray:
        """Vectorized evaluation; raises if any position lies outside the partition."""
        positions = np.asarray(positions, dtype=np.float64)
        rng = self.partition.range
        if positions.size and (positions.min() < rng.lo or positions.max() > rng.hi):
            raise CoverageError("state outside the partitioned range")
        idx = np.searchsorted(np.asarray(self.partition.edges), positions, side="right")
        return np.asarray(self.bounds)[idx]

    def to_json(self) -> dict:
        return {
            "type": "state",
            "alpha": self.confidence,
            "partition": [box.to_json() for box in self.partition.regions()],
            "bounds": [_enc(b) for b in self.bounds],
        }


@dataclass(frozen=True)
class TimeBoundFunction:
    per_step_bounds: tuple[float, ...]
    confidence: float

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.per_step_bounds)
        if not bounds or any(not (b >= 0) for b in bounds):
            raise InputError("per-step bounds must be non-empty and >= 0")
        object.__setattr__(self, "per_step_bounds", bounds)

    @property
    def alpha(self) -> float:
        return self.confidence

    @property
    def horizon(self) -> int:
        return len(self.per_step_bounds) - 1

    def __call__(self, k: int) -> float:
        return self.per_step_bounds[k]

    def to_json(self) -> dict:
        return {
            "type": "time",
            "alpha": self.confidence,
            "partition": [],
            "bounds": [_enc(b) for b in self.per_step_bounds],
        }


Bound = Union[EtaFunction, TimeBoundFunction]


def _enc(x: float):
    return "inf" if math.isinf(x) else x


def _dec(x) -> float:
    return math.inf if x in ("inf", "Infinity", None) else float(x)


def bound_from_json(obj: dict) -> Bound:
    alpha = float(obj["alpha"])
    bounds = [_dec(b) for b in obj["bounds"]]
    if obj["type"] == "time":
        return TimeBoundFunction(tuple(bounds), alpha)
    if obj["type"] != "state":
        raise InputError(f"unknown bound type {obj['type']!r}")
    boxes = [BoxSet.from_json(b) for b in obj["partition"]]
    partition = Partition.from_regions(boxes)
    return EtaFunction(partition, tuple(bounds), alpha)


def bound_to_json(bound: Bound) -> str:
    return json.dumps(bound.to_json(), sort_keys=True)


def eta_eval(eta: EtaFunction, state: State | float) -> float:
    p = state.position if isinstance(state, State) else float(state)
    return eta.bounds[eta.partition.region_of(p)]


# ---------------------------------------------------------------------------
# fitting


def region_scores(dataset: Dataset, partition: Partition) -> list[np.ndarray]:
    """Finite sub-trajectory scores of every region, via the region kernel."""
    flat = dataset.flat()
    maxerr, _, _ = kernels.region_stats(
        flat.position, flat.error, flat.traj, flat.time, partition.edges, flat.n_traj, np.ones(dataset.horizon + 1)
    )
    return [row[row >= 0.0] for row in maxerr]


def bounds_from_scores(scores: Sequence[np.ndarray], alpha: float) -> tuple[float, ...]:
    m = len(scores)
    level = 1.0 - alpha / m
    return tuple(math.inf if len(s) == 0 else conformal_quantile(s, level) for s in scores)


def fit_eta(dataset: Dataset, partition: Partition, alpha: float) -> EtaFunction:
    """Per-region conformal bounds at level ``1 - alpha/M``."""
    if not 0.0 < alpha < 1.0:
        raise InputError("alpha must lie in (0, 1)")
    if len(dataset) == 0:
        raise InputError("empty calibration dataset")
    return EtaFunction(partition, bounds_from_scores(region_scores(dataset, partition), alpha), alpha)


def _error_matrix(dataset: Dataset, horizon: int) -> np.ndarray:
    """Errors as an (N, T+1) array, NaN where a trajectory has ended."""
    out = np.full((len(dataset), horizon + 1), np.nan)
    for j, tr in enumerate(dataset):
        out[j, : len(tr)] = tr.errors
    return out


def fit_time_baseline(dataset_alpha: Dataset, dataset_conf: Dataset, alpha: float, horizon: int) -> TimeBoundFunction:
    """Per-time-step bounds from normalized maximum errors.

    ``m_t`` is the largest error at step ``t`` in ``dataset_alpha`` (floored at
    1e-6; steps no trajectory reaches take the largest observed ``m``).  Each
    trajectory of ``dataset_conf`` is scored by ``max_t err_t / m_t`` and the
    bound is ``q * m_t`` with ``q`` the ``1 - alpha`` conformal quantile.
    """
    if len(dataset_alpha) == 0 or len(dataset_conf) == 0:
        raise InputError("both baseline splits must be non-empty")
    if dataset_alpha.horizon != horizon or dataset_conf.horizon != horizon:
        raise InputError(f"dataset horizon does not match requested horizon {horizon}")
    if not 0.0 < alpha < 1.0:
        raise InputError("alpha must lie in (0, 1)")
    errs_a = _error_matrix(dataset_alpha, horizon)
    observed = ~np.all(np.isnan(errs_a), axis=0)
    m = np.full(horizon + 1, np.nan)
    m[observed] = np.nanmax(errs_a[:, observed], axis=0)
    m = np.maximum(m, NORMALIZER_FLOOR)
    m[~observed] = np.max(m[observed])
    ratios = np.nanmax(_error_matrix(dataset_conf, horizon) / m, axis=1)
    q = conformal_quantile(ratios, 1.0 - alpha)
    return TimeBoundFunction(tuple(q * m), alpha)


def validate_coverage(bound: Bound, test: Dataset) -> float:
    """Fraction of test trajectories whose error respects the bound at every step."""
    if len(test) == 0:
        raise InputError("empty test dataset")
    ok = 0
    for tr in test:
        if isinstance(bound, EtaFunction):
            b = bound.bound_array(tr.position)
        else:
            if len(tr) > len(bound.per_step_bounds):
                raise InputError("test trajectory longer than the bound's horizon")
            b = np.asarray(bound.per_step_bounds[: len(tr)])
        ok += bool(np.all(tr.errors <= b))
    return ok / len(test)
