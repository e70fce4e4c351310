"""Position-axis partitions and the gradient-free search for good ones.

A partition with ``M`` regions is stored as ``M - 1`` interior cut points.
Region ``i`` is ``[edge_{i-1}, edge_i)``; the last region is closed on the
right so the regions tile the range exactly.

Candidate partitions are scored by fitting per-region conformal bounds on
one data split and weighting them by how often (and, for the time-decay
loss, how early) another split visits each region.
"""
from __future__ import annotations

import math
import warnings
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import kernels
from .core import POSITION_BOUNDS, VELOCITY_BOUNDS, BoxSet, CoverageError, Dataset, InputError, Interval

if TYPE_CHECKING:
    from .conformal import EtaFunction

MIN_REGION_WIDTH = 1e-3
FULL_RANGE = Interval(*POSITION_BOUNDS)


@dataclass(frozen=True)
class Partition:
    edges: tuple[float, ...] = ()
    range: Interval = FULL_RANGE
    dimension: str = "position"

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.dimension != "position":
            raise InputError("only position partitions are supported")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise InputError(f"edges must be strictly increasing: {edges}")
        if edges and not (self.range.lo < edges[0] and edges[-1] < self.range.hi):
            raise InputError(f"edges must lie strictly inside {self.range}")

    @property
    def m(self) -> int:
        return len(self.edges) + 1

    def region_of(self, position: float) -> int:
        """0-based index of the region containing ``position``."""
        if not self.range.lo <= position <= self.range.hi:
            raise CoverageError(f"position {position} outside partition range {self.range}")
        return bisect_right(self.edges, position)

    def region_interval(self, i: int) -> Interval:
        cuts = (self.range.lo,) + self.edges + (self.range.hi,)
        return Interval(cuts[i], cuts[i + 1])

    def regions(self) -> list[BoxSet]:
        vel = Interval(*VELOCITY_BOUNDS)
        return [BoxSet(self.region_interval(i), vel) for i in range(self.m)]

    @classmethod
    def from_regions(cls, boxes: Sequence[BoxSet]) -> Partition:
        if not boxes:
            raise InputError("a partition needs at least one region")
        for a, b in zip(boxes, boxes[1:]):
            if a.position.hi != b.position.lo:
                raise InputError("regions must be contiguous and ordered")
        return cls(tuple(b.position.hi for b in boxes[:-1]), Interval(boxes[0].position.lo, boxes[-1].position.hi))


def uniform_partition(m: int, span: Interval = FULL_RANGE) -> Partition:
    if m < 1:
        raise InputError("m must be >= 1")
    width = span.hi - span.lo
    return Partition(tuple(span.lo + width * i / m for i in range(1, m)), span)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ETDL"
    decay_base: float = 0.9

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in ("EL", "ETDL"):
            raise InputError(f"unknown loss {self.kind!r}")
        if not 0.0 < self.decay_base <= 1.0:
            raise InputError("decay_base must lie in (0, 1]")
        object.__setattr__(self, "kind", kind)

    @property
    def decay(self) -> float:
        return self.decay_base if self.kind == "ETDL" else 1.0


def time_weights(decay: float, horizon: int) -> np.ndarray:
    return np.array([decay**t for t in range(horizon + 1)])


def visit_stats(dataset: Dataset, partition: Partition, decay: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-region visit counts and decay-weighted visit sums."""
    flat = dataset.flat()
    _, counts, weighted = kernels.region_stats(
        flat.position, flat.error, flat.traj, flat.time, partition.edges, flat.n_traj,
        time_weights(decay, dataset.horizon),
    )
    return counts, weighted


def experience_weights(dataset: Dataset, partition: Partition) -> np.ndarray:
    if len(dataset) == 0:
        raise InputError("empty dataset")
    counts, _ = visit_stats(dataset, partition)
    return counts / counts.sum()


def _weighted_loss(counts: np.ndarray, weighted: np.ndarray, bounds: Sequence[float]) -> float:
    w = counts / counts.sum()
    loss = 0.0
    for i, e in enumerate(bounds):
        if counts[i]:
            loss += w[i] * weighted[i] * e
    return float(loss)


def loss_el(dataset: Dataset, partition: Partition, eta: EtaFunction) -> float:
    """Visit-frequency weighted sum of region bounds over every visited state."""
    counts, _ = visit_stats(dataset, partition)
    return _weighted_loss(counts, counts.astype(np.float64), eta.bounds)


def loss_etdl(dataset: Dataset, partition: Partition, eta: EtaFunction, decay: float = 0.9) -> float:
    """As :func:`loss_el` with each visit at step ``t`` weighted by ``decay**t``."""
    if not 0.0 < decay <= 1.0:
        raise InputError("decay must lie in (0, 1]")
    counts, weighted = visit_stats(dataset, partition, decay)
    return _weighted_loss(counts, weighted, eta.bounds)


# ---------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "GA"
    budget: int = 1500
    population: int = 30
    mutation_rate: float = 0.3
    initial_temperature: float | None = None
    cooling_rate: float = 0.995
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in ("GA", "SA"):
            raise InputError(f"unknown optimizer {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.budget < 1:
            raise InputError("budget must be >= 1")
        if kind == "GA" and self.population < 2:
            raise InputError("GA population must be >= 2")
        if not 0.0 < self.cooling_rate < 1.0:
            raise InputError("cooling_rate must lie in (0, 1)")


@dataclass
class OptimizationResult:
    partition: Partition
    eta: EtaFunction
    loss: float
    loss_history: list[float]
    evaluations: int
    status: str = "ok"
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    loss_spec: LossSpec = field(default_factory=LossSpec)


def repair_edges(edges: np.ndarray, span: Interval = FULL_RANGE, min_width: float = MIN_REGION_WIDTH) -> np.ndarray:
    """Project sorted edges so every region is at least ``min_width`` wide."""
    e = np.sort(np.asarray(edges, dtype=np.float64))
    n = len(e)
    if n == 0:
        return e
    if (n + 1) * min_width > span.hi - span.lo:
        raise InputError("too many regions for the minimum region width")
    e[0] = max(e[0], span.lo + min_width)
    for i in range(1, n):
        e[i] = max(e[i], e[i - 1] + min_width)
    e[-1] = min(e[-1], span.hi - min_width)
    for i in range(n - 2, -1, -1):
        e[i] = min(e[i], e[i + 1] - min_width)
    return e


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    for _ in range(8):
        x = np.where(x < lo, 2 * lo - x, x)
        x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi)


class _Evaluator:
    """Scores candidate edge vectors; tracks the incumbent and its history."""

    def __init__(self, data_reg: Dataset, data_conf: Dataset, m: int, loss: LossSpec, alpha: float, span: Interval):
        from .conformal import bounds_from_scores

        self._bounds_from_scores = bounds_from_scores
        self.reg = data_reg.flat()
        self.conf = data_conf.flat()
        self.m = m
        self.alpha = alpha
        self.span = span
        self.tw_reg = time_weights(loss.decay, data_reg.horizon)
        self.ones_conf = np.ones(data_conf.horizon + 1)
        self.best_loss = math.inf
        self.best_edges: np.ndarray | None = None
        self.best_bounds: tuple[float, ...] = ()
        self.history: list[float] = []

    def bounds(self, partition: Partition) -> tuple[float, ...]:
        c = self.conf
        maxerr, _, _ = kernels.region_stats(c.position, c.error, c.traj, c.time, partition.edges, c.n_traj, self.ones_conf)
        return self._bounds_from_scores([row[row >= 0.0] for row in maxerr], self.alpha)

    def __call__(self, edges: np.ndarray) -> float:
        partition = Partition(tuple(edges), self.span)
        if partition.m != self.m:
            raise InputError("candidate has the wrong number of regions")
        bounds = self.bounds(partition)
        r = self.reg
        _, counts, weighted = kernels.region_stats(r.position, r.error, r.traj, r.time, partition.edges, r.n_traj, self.tw_reg)
        loss = _weighted_loss(counts, weighted, bounds)
        if self.best_edges is None or loss < self.best_loss:
            self.best_loss, self.best_edges, self.best_bounds = loss, np.array(edges), bounds
        self.history.append(self.best_loss)
        return loss


def _run_ga(f: _Evaluator, opt: OptimizerSpec, rng: np.random.Generator) -> None:
    lo, hi = f.span.lo, f.span.hi
    sigma = 0.05 * (hi - lo)
    n_edges = f.m - 1
    budget = opt.budget

    pop = [repair_edges(uniform_partition(f.m, f.span).edges, f.span)]
    while len(pop) < opt.population:
        pop.append(repair_edges(rng.uniform(lo, hi, n_edges), f.span))
    fitness = []
    for ind in pop:
        if len(f.history) >= budget:
            break
        fitness.append(f(ind))
    pop = pop[: len(fitness)]

    def tournament() -> np.ndarray:
        i, j = rng.integers(len(pop), size=2)
        return pop[i] if fitness[i] <= fitness[j] else pop[j]

    while len(f.history) < budget:
        elite = int(np.argmin(fitness))
        new_pop, new_fit = [pop[elite]], [fitness[elite]]
        while len(new_pop) < opt.population and len(f.history) < budget:
            a, b = tournament(), tournament()
            child = np.where(rng.random(n_edges) < 0.5, a, b)
            mutate = rng.random(n_edges) < opt.mutation_rate
            child = np.where(mutate, child + rng.normal(0.0, sigma, n_edges), child)
            child = repair_edges(_reflect(child, lo, hi), f.span)
            new_pop.append(child)
            new_fit.append(f(child))
        pop, fitness = new_pop, new_fit


def _run_sa(f: _Evaluator, opt: OptimizerSpec, rng: np.random.Generator) -> None:
    lo, hi = f.span.lo, f.span.hi
    sigma = 0.05 * (hi - lo)
    current = repair_edges(uniform_partition(f.m, f.span).edges, f.span)
    cur_loss = f(current)
    temp = opt.initial_temperature
    if temp is None:
        temp = cur_loss if math.isfinite(cur_loss) and cur_loss > 0 else 1.0
    while len(f.history) < opt.budget:
        proposal = current.copy()
        i = rng.integers(len(proposal))
        proposal[i] = _reflect(proposal[i] + rng.normal(0.0, sigma), lo, hi)
        proposal = repair_edges(proposal, f.span)
        new_loss = f(proposal)
        u = rng.random()
        if math.isinf(new_loss):
            accept = math.isinf(cur_loss)
        elif math.isinf(cur_loss) or new_loss <= cur_loss:
            accept = True
        else:
            accept = u < math.exp(-(new_loss - cur_loss) / temp)
        if accept:
            current, cur_loss = proposal, new_loss
        temp *= opt.cooling_rate


def optimize_partition(
    data_reg: Dataset,
    data_conf: Dataset,
    m: int,
    loss: LossSpec = LossSpec(),
    opt: OptimizerSpec = OptimizerSpec(),
    alpha: float = 0.05,
    span: Interval = FULL_RANGE,
) -> OptimizationResult:
    """Search ``M``-region partitions minimizing the experience loss.

    Bounds are fitted on ``data_conf``; the loss weights them by visits in
    ``data_reg``.  Returns the best candidate seen within ``opt.budget``
    evaluations together with the best-so-far loss after each evaluation.
    """
    from .conformal import EtaFunction

    if m < 1:
        raise InputError("m must be >= 1")
    if len(data_reg) == 0 or len(data_conf) == 0:
        raise InputError("both data splits must be non-empty")
    f = _Evaluator(data_reg, data_conf, m, loss, alpha, span)
    rng = np.random.default_rng(opt.seed)
    if m == 1:
        f(np.zeros(0))
    elif opt.kind == "GA":
        _run_ga(f, opt, rng)
    else:
        _run_sa(f, opt, rng)

    partition = Partition(tuple(f.best_edges), span)
    status = "ok"
    if math.isinf(f.best_loss):
        status = "infeasible"
        warnings.warn(f"no finite-loss {m}-region partition found; data too sparse for some region", RuntimeWarning)
    return OptimizationResult(
        partition, EtaFunction(partition, f.best_bounds, alpha), f.best_loss, list(f.history), len(f.history),
        status, opt, loss,
    )
