"""Box flowpipes for the perception-in-the-loop mountain car.

The initial position set is cut into sub-intervals, each propagated as a set
of *branches*.  A branch is a box tagged with the partition region that
contains it; its measurement is inflated by that region's error bound,
pushed through the interval controller and interval dynamics, and the
successor box is split again along region edges.  Branch growth is kept in
check by the merge strategies:

``NoMerge``
    keep every branch.
``OppMerge``
    at checkpoint steps drop branches contained in another branch of the
    same region (exact: the hull is unchanged).
``GreedyMerge``
    additionally replace a region's branches by their hull once there are
    more than ``greedy_threshold`` of them.

Pieces of a box at or beyond the goal position are recorded at that step
and then retired, since real trajectories stop there.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from itertools import count
from typing import Iterator, Sequence, Union


from . import kernels
from .conformal import Bound, EtaFunction, TimeBoundFunction
from .core import BoxSet, InputError, Interval, Trajectory, box_contains, box_hull, outward_enabled
from .partition import Partition
from .system import Controller, MountainCarParams, controller_to_json, default_controller

MERGE_STRATEGIES = ("NoMerge", "OppMerge", "GreedyMerge")

ACTIVE, MERGED, INFEASIBLE, GOAL = "active", "merged", "infeasible", "goal"

RegionTag = Union[int, str, None]


@dataclass
class Branch:
    id: int
    box: BoxSet
    region_index: RegionTag
    created_at: int
    status: str = ACTIVE
    parent: int | None = None
    merged_into: int | None = None
    checkpoint: bool = False


@dataclass(frozen=True)
class VerifySpec:
    bound: Bound
    initial_set: Interval = Interval(-0.51, -0.49)
    subdivisions: int = 50
    horizon: int = 90
    controller: Controller = field(default_factory=default_controller)
    params: MountainCarParams = MountainCarParams()
    merge_strategy: str = "OppMerge"
    normalize_period: int = 5
    greedy_threshold: int = 8
    max_branches: int = 512
    keep_boxes: bool = False

    def __post_init__(self):
        if self.subdivisions < 1:
            raise InputError("subdivisions must be >= 1")
        if self.horizon < 0:
            raise InputError("horizon must be >= 0")
        if self.merge_strategy not in MERGE_STRATEGIES:
            raise InputError(f"merge strategy must be one of {MERGE_STRATEGIES}")
        if self.normalize_period < 1 or self.greedy_threshold < 1 or self.max_branches < 1:
            raise InputError("normalize_period, greedy_threshold and max_branches must be >= 1")
        if isinstance(self.bound, TimeBoundFunction) and self.bound.horizon < self.horizon:
            raise InputError("time bound shorter than the verification horizon")

    @property
    def partition(self) -> Partition | None:
        return self.bound.partition if isinstance(self.bound, EtaFunction) else None

    def digest(self) -> str:
        doc = {
            "bound": self.bound.to_json(),
            "initial_set": self.initial_set.as_list(),
            "subdivisions": self.subdivisions,
            "horizon": self.horizon,
            "controller": controller_to_json(self.controller),
            "params": self.params.to_json(),
            "merge_strategy": self.merge_strategy,
            "normalize_period": self.normalize_period,
            "greedy_threshold": self.greedy_threshold,
            "max_branches": self.max_branches,
            "outward": outward_enabled(),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


class InfeasibleBound(Exception):
    def __init__(self, region: RegionTag, step: int):
        super().__init__(f"bound infeasible in region {region} at step {step}")
        self.region = region
        self.step = step


# ---------------------------------------------------------------------------
# branch operations


def split_by_regions(box: BoxSet, partition: Partition) -> list[tuple[int, BoxSet]]:
    """Intersections of ``box`` with each region it touches, left to right.

    A box ending exactly on an edge also yields a degenerate piece in the
    region to the right, because the edge point belongs to that region.
    """
    rng = partition.range
    lo, hi = max(box.position.lo, rng.lo), min(box.position.hi, rng.hi)
    if lo > hi:
        return []
    first, last = partition.region_of(lo), partition.region_of(hi)
    pieces = []
    for i in range(first, last + 1):
        r = partition.region_interval(i)
        pieces.append((i, BoxSet(Interval(max(lo, r.lo), min(hi, r.hi)), box.velocity)))
    return pieces


def _bound_for(branch: Branch, bound: Bound, k: int) -> float:
    if isinstance(bound, TimeBoundFunction):
        return bound(k)
    return bound.bounds[branch.region_index]


def _children(box: BoxSet, spec: VerifySpec, k: int, parent: int | None, ids: Iterator[int]) -> list[Branch]:
    """Tag a freshly computed box: retire the part past the goal, split the rest by region."""
    goal = spec.params.goal_position
    out = []
    p = box.position
    if p.hi >= goal:
        out.append(Branch(next(ids), BoxSet(Interval(max(p.lo, goal), p.hi), box.velocity), None, k, GOAL, parent))
        if p.lo >= goal:
            return out
        box = BoxSet(Interval(p.lo, goal), box.velocity)
    if spec.partition is None:
        out.append(Branch(next(ids), box, None, k, ACTIVE, parent))
    else:
        for i, piece in split_by_regions(box, spec.partition):
            out.append(Branch(next(ids), piece, i, k, ACTIVE, parent))
    return out


def step_branch(branch: Branch, spec: VerifySpec, k: int, ids: Iterator[int]) -> list[Branch]:
    """Advance one active branch from step ``k`` to ``k + 1``."""
    if branch.status != ACTIVE:
        raise InputError("only active branches can be stepped")
    e = _bound_for(branch, spec.bound, k)
    if math.isinf(e):
        branch.status = INFEASIBLE
        raise InfeasibleBound(branch.region_index, k)
    b = branch.box
    pl, ph, vl, vh = kernels.closed_loop_box_step(
        b.position.lo, b.position.hi, b.velocity.lo, b.velocity.hi, e,
        spec.controller.pack, spec.params.as_tuple(), spec.params.gym_ordering, outward_enabled(),
    )
    return _children(BoxSet(Interval(pl, ph), Interval(vl, vh)), spec, k + 1, branch.id, ids)


def normalize_branch(branch: Branch) -> Branch:
    """Mark a merge checkpoint.  Boxes are already in normal form."""
    return replace(branch, checkpoint=True)


def _by_region(branches: Sequence[Branch]) -> dict[RegionTag, list[Branch]]:
    groups: dict[RegionTag, list[Branch]] = {}
    for b in branches:
        groups.setdefault(b.region_index, []).append(b)
    return groups


def _opp_scan(branches: list[Branch]) -> list[Branch]:
    # containers are at least as wide in both dimensions, so visiting by
    # decreasing width meets every container before what it contains
    order = sorted(branches, key=lambda b: (-b.box.position.width, -b.box.velocity.width, b.id))
    keep: list[Branch] = []
    for b in order:
        host = next((a for a in keep if box_contains(a.box, b.box)), None)
        if host is None:
            keep.append(b)
        else:
            b.status, b.merged_into = MERGED, host.id
    return sorted(keep, key=lambda b: b.id)


def _hull_merge(branches: list[Branch], k: int, ids: Iterator[int]) -> Branch:
    merged = Branch(next(ids), box_hull([b.box for b in branches]), branches[0].region_index, k, ACTIVE)
    for b in branches:
        b.status, b.merged_into = MERGED, merged.id
    return merged


def merge_branches(
    branches: list[Branch],
    strategy: str,
    *,
    k: int = 0,
    checkpoint: bool = True,
    greedy_threshold: int = 8,
    ids: Iterator[int] | None = None,
) -> list[Branch]:
    """Apply a merge strategy to the active branches of one step."""
    if strategy not in MERGE_STRATEGIES:
        raise InputError(f"unknown merge strategy {strategy!r}")
    if strategy == "NoMerge":
        return list(branches)
    ids = ids if ids is not None else count(max((b.id for b in branches), default=-1) + 1)
    out = []
    for _, group in _by_region(branches).items():
        if checkpoint:
            group = _opp_scan(group)
        if strategy == "GreedyMerge" and len(group) > greedy_threshold:
            group = [_hull_merge(group, k, ids)]
        out.extend(group)
    return sorted(out, key=lambda b: b.id)


def _cap(branches: list[Branch], limit: int, k: int, ids: Iterator[int]) -> tuple[list[Branch], int]:
    """Hull-merge regions, most crowded first, until at most ``limit`` branches remain."""
    if len(branches) <= limit:
        return branches, 0
    groups = sorted(_by_region(branches).values(), key=len, reverse=True)
    total, forced, out = len(branches), 0, []
    for g in groups:
        if total > limit and len(g) > 1:
            out.append(_hull_merge(g, k, ids))
            total -= len(g) - 1
            forced += 1
        else:
            out.extend(g)
    return sorted(out, key=lambda b: b.id), forced


# ---------------------------------------------------------------------------
# tubes


@dataclass(frozen=True)
class StepRecord:
    k: int
    hull: BoxSet
    n_branches: int
    boxes: tuple[BoxSet, ...] | None = None

    @property
    def pos_width(self) -> float:
        return self.hull.position.width


@dataclass
class ReachTube:
    per_step: list[StepRecord]
    merge_strategy: str
    horizon: int
    status: str = "ok"
    infeasible_region: RegionTag = None
    infeasible_step: int | None = None
    wall_time: float = 0.0
    audit: dict = field(default_factory=dict)
    spec_digest: str = ""

    @property
    def max_set_size(self) -> float:
        return max(r.pos_width for r in self.per_step)

    @property
    def total_branches(self) -> int:
        return sum(r.n_branches for r in self.per_step)

    @property
    def sizes(self) -> list[float]:
        return [r.pos_width for r in self.per_step]

    def hull(self, k: int) -> BoxSet:
        return self.per_step[k].hull

    def contains(self, traj: Trajectory) -> bool:
        """Whether every realized state of ``traj`` lies in the hull of its step."""
        n = len(traj)
        if n > len(self.per_step):
            # the tube ended (every branch retired at the goal, or truncated) while the trajectory went on
            return False
        for k in range(n):
            h = self.per_step[k].hull
            if not h.contains_state(float(traj.position[k]), float(traj.velocity[k])):
                return False
        return True

    def containment_rate(self, trajectories: Sequence[Trajectory]) -> float:
        if not trajectories:
            raise InputError("no trajectories to check")
        return sum(self.contains(t) for t in trajectories) / len(trajectories)

    def metrics(self, include_timing: bool = True) -> dict:
        out = {
            "max_set_size": self.max_set_size,
            "sizes": self.sizes,
            "branch_counts": [r.n_branches for r in self.per_step],
            "total_branches": self.total_branches,
            "merge_strategy": self.merge_strategy,
            "status": self.status,
            "forced_merges": self.audit.get("forced_merges", 0),
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def to_json(self, include_timing: bool = True) -> dict:
        return {
            "spec_digest": self.spec_digest,
            "status": self.status,
            "infeasible_region": self.infeasible_region,
            "infeasible_step": self.infeasible_step,
            "horizon": self.horizon,
            "per_step": [
                {"k": r.k, "hull": r.hull.to_json(), "n_branches": r.n_branches, "pos_width": r.pos_width}
                for r in self.per_step
            ],
            "metrics": self.metrics(include_timing),
            "audit": self.audit,
        }

    @classmethod
    def from_json(cls, obj: dict) -> ReachTube:
        steps = [StepRecord(r["k"], BoxSet.from_json(r["hull"]), r["n_branches"]) for r in obj["per_step"]]
        return cls(
            steps, obj["metrics"]["merge_strategy"], obj["horizon"], obj["status"], obj.get("infeasible_region"),
            obj.get("infeasible_step"), obj["metrics"].get("wall_time", 0.0), obj.get("audit", {}), obj["spec_digest"],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "p_lo", "p_hi", "v_lo", "v_hi", "n_branches"])
        for r in self.per_step:
            h = r.hull
            w.writerow([r.k, repr(h.position.lo), repr(h.position.hi), repr(h.velocity.lo), repr(h.velocity.hi), r.n_branches])
        return buf.getvalue()


def reach_metrics(tube: ReachTube) -> dict:
    return tube.metrics()


def subdivide(initial: Interval, n: int) -> list[Interval]:
    w = initial.hi - initial.lo
    cuts = [initial.lo + w * i / n for i in range(n)] + [initial.hi]
    return [Interval(a, b) for a, b in zip(cuts, cuts[1:])]


def compute_reach_tube(spec: VerifySpec) -> ReachTube:
    """Propagate every sub-interval of the initial set for ``spec.horizon`` steps.

    Sub-intervals are advanced in lock step so the per-step hull can be
    accumulated directly; merges never mix branches of different
    sub-intervals.
    """
    t0 = time.perf_counter()
    ids = count()
    registry: dict[int, Branch] = {}

    def register(branches):
        for b in branches:
            registry[b.id] = b

    zero = Interval(0.0, 0.0)
    pools = [_children(BoxSet(sub, zero), spec, 0, None, ids) for sub in subdivide(spec.initial_set, spec.subdivisions)]
    for pool in pools:
        register(pool)
    forced = 0
    records: list[StepRecord] = []
    status, bad_region, bad_step = "ok", None, None

    for k in range(spec.horizon + 1):
        shown: list[BoxSet] = []
        n_shown = 0
        for s, pool in enumerate(pools):
            goal_now = [b for b in pool if b.status == GOAL]
            active = [b for b in pool if b.status == ACTIVE]
            if spec.merge_strategy != "NoMerge":
                checkpoint = k % spec.normalize_period == 0
                if checkpoint:
                    active = [normalize_branch(b) for b in active]
                    register(active)
                active = merge_branches(
                    active, spec.merge_strategy, k=k, checkpoint=checkpoint,
                    greedy_threshold=spec.greedy_threshold, ids=ids,
                )
            active, f = _cap(active, spec.max_branches, k, ids)
            register(active)
            forced += f
            pools[s] = active
            shown.extend(b.box for b in active)
            shown.extend(b.box for b in goal_now)
            n_shown += len(active) + len(goal_now)
        if not shown:
            break
        records.append(StepRecord(k, box_hull(shown), n_shown, tuple(shown) if spec.keep_boxes else None))
        if k == spec.horizon:
            break
        try:
            nxt = []
            for pool in pools:
                kids = [c for b in pool for c in step_branch(b, spec, k, ids)]
                register(kids)
                nxt.append(kids)
            pools = nxt
        except InfeasibleBound as exc:
            status, bad_region, bad_step = "infeasible", exc.region, exc.step
            break

    audit = _audit(registry, next(ids))
    audit["forced_merges"] = forced
    return ReachTube(
        records, spec.merge_strategy, spec.horizon, status, bad_region, bad_step,
        time.perf_counter() - t0, audit, spec.digest(),
    )


def _audit(registry: dict[int, Branch], issued: int) -> dict:
    """Every id handed out is accounted for once, and merges point at real branches."""
    counts = {ACTIVE: 0, MERGED: 0, INFEASIBLE: 0, GOAL: 0}
    dangling = 0
    for b in registry.values():
        counts[b.status] += 1
        if b.status == MERGED and b.merged_into not in registry:
            dangling += 1
    return {"issued": issued, "tracked": len(registry), **counts, "dangling_merges": dangling}
