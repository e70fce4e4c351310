"""The nine acceptance criteria, each at its stated tolerance.

Every test appends one "ACCEPTANCE criterion N PASS|FAIL: ..." line that the
terminal summary prints at the end of the run.
"""
import json
import math

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from confreach.cli import main
from confreach.conformal import EtaFunction, bound_from_json, conformal_quantile, fit_eta
from confreach.core import (
    BoxSet,
    Interval,
    State,
    box_contains,
    interval_add,
    interval_cos,
    interval_scale,
)
from confreach.partition import LossSpec, OptimizerSpec, Partition, loss_el, loss_etdl, optimize_partition
from confreach.reach import VerifySpec, compute_reach_tube
from confreach.system import (
    Layer,
    MlpController,
    MountainCarParams,
    NoiseProfile,
    controller_eval,
    controller_eval_interval,
    default_controller,
    dynamics_step,
    dynamics_step_interval,
    generate_dataset,
)

pytestmark = pytest.mark.acceptance

X0 = Interval(-0.51, -0.49)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"ACCEPTANCE criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def run_pipeline(out, extra=None):
    args = ["run", "--out", str(out)]
    if extra is not None:
        cfg = out.parent / f"{out.name}.cfg.json"
        cfg.write_text(json.dumps(extra))
        args += ["--config", str(cfg)]
    code = main(args)
    assert code == 0
    return json.loads((out / "report" / "report.json").read_text())


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The default desk-scale pipeline, run once for criteria 3, 4 and 9."""
    out = tmp_path_factory.mktemp("desk") / "run1"
    return out, run_pipeline(out)


def test_criterion_1_quantile_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 501))
        # rounding forces ties, which is where rank bookkeeping goes wrong
        scores = rng.exponential(1.0, n).round(int(rng.integers(1, 4))).tolist()
        level = float(rng.uniform(0.01, 0.999))
        mismatches += conformal_quantile(scores, level) != oracles.rank_quantile(scores, level)
    record(1, mismatches == 0, f"{mismatches} mismatches on 1000 random score sets")


def test_criterion_2_coverage(tmp_path):
    # paper-scale protocol: 4000 trajectories split 2000/2000, D_reg/D_conf 500/1500
    cfg = _write(tmp_path, {"partition": {"m": [1, 3, 5], "methods": ["GA+ETDL"], "baseline": False}})
    out = tmp_path / "paper_splits"
    for stage in ("generate", "calibrate"):
        assert main([stage, "--paper-scale", "--out", str(out), "--config", cfg]) == 0
    cov = {}
    for name in ("uniform_M1", "uniform_M3", "uniform_M5", "GA_ETDL_M3"):
        cov[name] = json.loads((out / "bounds" / f"{name}.json").read_text())["coverage_on_test"]
    ok = all(c >= 0.94 for c in cov.values())
    record(2, ok, "coverage on 2000 test trajectories " + ", ".join(f"{k}={v:.4f}" for k, v in cov.items()))


def _write(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_criterion_3_tube_soundness(desk_run):
    out, _ = desk_run
    bound = bound_from_json(json.loads((out / "bounds" / "GA_ETDL_M5.json").read_text()))
    tube = compute_reach_tube(VerifySpec(bound, initial_set=X0, subdivisions=50))
    fresh = generate_dataset(1000, X0, default_controller(), NoiseProfile(), MountainCarParams(), 90, 987654)
    inside = [tube.contains(tr) for tr in fresh]
    respects = [all(e <= bound(p) for e, p in zip(tr.errors, tr.position)) for tr in fresh]
    n_resp = sum(respects)
    resp_inside = sum(i for i, r in zip(inside, respects) if r)
    rate = float(np.mean(inside))
    ok = tube.status == "ok" and rate >= 0.94 and resp_inside == n_resp
    record(3, ok, f"{rate:.3f} of 1000 fresh trajectories inside; {resp_inside}/{n_resp} bound-respecting inside")


def test_criterion_4_trend(desk_run):
    _, report = desk_run
    size = {r["name"]: r["max_set_size"] for r in report["rows"]}
    ga, uni, base = size["GA_ETDL_M5"], size["uniform_M1"], size["time"]
    record(4, ga < uni and ga < base, f"GA+ETDL M=5 {ga:.4f} < uniform M=1 {uni:.4f} and < time baseline {base:.4f}")


def test_criterion_5_merge_equivalence():
    rng = np.random.default_rng(55)
    worst, details, ok = 0.0, [], True
    for _ in range(5):
        m = int(rng.integers(2, 6))
        edges = tuple(sorted(rng.choice(np.arange(-1.1, 0.5, 0.01), m - 1, replace=False).round(2)))
        bounds = tuple(rng.uniform(0.01, 0.15, m))
        lo = float(rng.uniform(-0.6, -0.42))
        spec = dict(initial_set=Interval(lo, lo + 0.02), subdivisions=int(rng.integers(5, 30)))
        eta = EtaFunction(Partition(edges), bounds, 0.05)
        no, opp, greedy = (compute_reach_tube(VerifySpec(eta, merge_strategy=s, **spec))
                           for s in ("NoMerge", "OppMerge", "GreedyMerge"))
        same_len = len(no.per_step) == len(opp.per_step)
        diff = max(max(abs(x - y) for x, y in zip(a.hull.as_tuple(), b.hull.as_tuple()))
                   for a, b in zip(no.per_step, opp.per_step))
        worst = max(worst, diff)
        contains = all(box_contains(g.hull, o.hull) for g, o in zip(greedy.per_step, opp.per_step))
        forced = sum(t.audit["forced_merges"] for t in (no, opp, greedy))
        ok &= same_len and diff <= 1e-12 and opp.total_branches <= no.total_branches and contains and forced == 0
        details.append(f"{opp.total_branches}/{no.total_branches}")
    record(5, ok, f"max hull gap {worst:.1e}; Opp/No branches {', '.join(details)}; Greedy contains Opp")


def _random_net(rng):
    return MlpController((
        Layer(rng.normal(0, 1, (12, 2)) * [4, 40], rng.normal(0, 1, 12), "sigmoid"),
        Layer(rng.normal(0, 1, (12, 12)), rng.normal(0, 1, 12), "tanh"),
        Layer(rng.normal(0, 1, (1, 12)), rng.normal(0, 1, 1), "tanh"),
    ))


def test_criterion_6_interval_fuzz():
    rng = np.random.default_rng(66)
    n_boxes, per_box = 1000, 100
    escapes = {k: 0 for k in ("add", "scale", "cos", "dynamics", "controller")}
    params = MountainCarParams()
    nets = [default_controller(), _random_net(rng)]
    for i in range(n_boxes):
        al, ah = sorted(rng.uniform(-4, 4, 2))
        bl, bh = sorted(rng.uniform(-4, 4, 2))
        c = float(rng.uniform(-3, 3))
        a, b = Interval(al, ah), Interval(bl, bh)
        add, scale, cos = interval_add(a, b), interval_scale(a, c), interval_cos(a)
        xs, ys = rng.uniform(al, ah, per_box), rng.uniform(bl, bh, per_box)
        escapes["add"] += sum(not add.contains(float(x + y)) for x, y in zip(xs, ys))
        escapes["scale"] += sum(not scale.contains(float(c * x)) for x in xs)
        escapes["cos"] += sum(not cos.contains(math.cos(float(x))) for x in xs)

        pl = float(rng.uniform(-1.2, 0.55))
        ph = min(pl + float(rng.uniform(0, 0.1)), 0.6)
        vl = float(rng.uniform(-0.07, 0.06))
        vh = min(vl + float(rng.uniform(0, 0.01)), 0.07)
        ul, uh = sorted(rng.uniform(-1, 1, 2))
        box = dynamics_step_interval(BoxSet.from_bounds(pl, ph, vl, vh), Interval(ul, uh), params)
        for p, v, u in zip(rng.uniform(pl, ph, per_box), rng.uniform(vl, vh, per_box), rng.uniform(ul, uh, per_box)):
            s = dynamics_step(State(float(p), float(v)), float(u), params)
            escapes["dynamics"] += not box.contains_state(s.position, s.velocity)

        net = nets[i % 2]
        yl = float(rng.uniform(-1.2, 0.5))
        yh = yl + float(rng.uniform(0, 0.2))
        out = controller_eval_interval(net, Interval(yl, yh), Interval(vl, vh))
        for y, v in zip(rng.uniform(yl, yh, per_box), rng.uniform(vl, vh, per_box)):
            escapes["controller"] += not out.contains(controller_eval(net, float(y), float(v)))
    n = n_boxes * per_box
    record(6, sum(escapes.values()) == 0, f"{n} samples per operation, escapes {escapes}")


def test_criterion_7_optimizer_sanity():
    step = NoiseProfile(((-1.2, 0.15), (-0.3001, 0.15), (-0.3, 0.02), (0.6, 0.02)))
    data = generate_dataset(600, Interval(-0.55, -0.45), default_controller(), step, MountainCarParams(), 90, 21)
    reg, conf = data.subset(range(200)), data.subset(range(200, 600))
    best_loss, best_edge = oracles.sweep_two_regions(reg, conf, 0.05, 0.9)
    found, ok = {}, True
    for kind in ("GA", "SA"):
        res = optimize_partition(reg, conf, 2, LossSpec("ETDL"), OptimizerSpec(kind, budget=500, seed=7), 0.05)
        edge = res.partition.edges[0]
        found[kind] = edge
        hist = res.loss_history
        ok &= abs(edge - best_edge) <= 0.05 and all(x >= y for x, y in zip(hist, hist[1:]))
    record(7, ok, f"sweep optimum {best_edge:.3f}; GA {found['GA']:.4f}, SA {found['SA']:.4f}; histories non-increasing")


def test_criterion_8_etdl_el_identity(desk_data):
    rng = np.random.default_rng(88)
    unequal = 0
    for _ in range(100):
        idx = rng.choice(len(desk_data), int(rng.integers(20, 300)), replace=False)
        data = desk_data.subset(sorted(idx))
        m = int(rng.integers(1, 8))
        edges = tuple(sorted(rng.choice(np.arange(-1.15, 0.55, 0.005), m - 1, replace=False)))
        p = Partition(edges)
        eta = fit_eta(desk_data.subset(range(500, 1000)), p, 0.05)
        unequal += loss_etdl(data, p, eta, 1.0) != loss_el(data, p, eta)
    record(8, unequal == 0, f"{unequal} of 100 random pairs differ")


def test_criterion_9_determinism(desk_run, tmp_path):
    _, first = desk_run
    second = run_pipeline(tmp_path / "run2")
    record(9, first["digest"] == second["digest"], f"report digests {first['digest'][:16]} / {second['digest'][:16]}")
