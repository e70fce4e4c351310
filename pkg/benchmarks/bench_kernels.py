"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each row times one kernel on identical inputs under both backends and
reports the best-of-N wall time and the speedup.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from confreach import kernels
from confreach.system import Layer, MlpController, MountainCarParams, NoiseProfile, default_controller


def workloads(backend, rng):
    pack = default_controller().pack
    big = MlpController((
        Layer(rng.normal(0, 1, (16, 2)), rng.normal(0, 1, 16), "sigmoid"),
        Layer(rng.normal(0, 1, (16, 16)), rng.normal(0, 1, 16), "sigmoid"),
        Layer(rng.normal(0, 1, (1, 16)), rng.normal(0, 1, 1), "tanh"),
    )).pack
    prm = MountainCarParams().as_tuple()
    boxes = [tuple(sorted(rng.uniform(-1.2, 0.6, 2))) + tuple(sorted(rng.uniform(-0.07, 0.07, 2))) for _ in range(2000)]
    xs, amps = zip(*NoiseProfile().breakpoints)
    zeta = rng.uniform(-1, 1, 91)
    n = 20000
    pos = rng.uniform(-1.2, 0.6, n)
    err = rng.uniform(0, 0.15, n)
    traj = np.repeat(np.arange(n // 100), 100)
    tstep = np.tile(np.arange(100), n // 100)
    tw = 0.9 ** np.arange(100)
    edges = [-0.8, -0.5, -0.2]

    def box_steps():
        for pl, ph, vl, vh in boxes:
            backend.closed_loop_box_step(pl, ph, vl, vh, 0.05, pack, prm, False, False)

    def big_box_steps():
        for pl, ph, vl, vh in boxes:
            backend.closed_loop_box_step(pl, ph, vl, vh, 0.05, big, prm, False, False)

    def controller_points():
        for pl, _, vl, _ in boxes:
            backend.controller_eval(pack, pl, vl)

    def rollouts():
        for p0 in np.linspace(-0.55, -0.45, 50):
            backend.rollout(float(p0), 0.0, zeta, xs, amps, pack, prm, 90, False)

    def stats():
        backend.region_stats(pos, err, traj, tstep, edges, n // 100, tw)

    return {
        "closed_loop_box_step x2000": box_steps,
        "box_step 16x16 MLP x2000": big_box_steps,
        "controller_eval x2000": controller_points,
        "rollout T=90 x50": rollouts,
        "region_stats 20k visits": stats,
    }


def bench(repeat: int) -> list[dict]:
    if kernels.compiled_backend is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rows = []
    py_jobs = workloads(kernels.python_backend, np.random.default_rng(0))
    cc_jobs = workloads(kernels.compiled_backend, np.random.default_rng(0))
    for name in py_jobs:
        t_py = min(timeit.repeat(py_jobs[name], number=1, repeat=repeat))
        t_cc = min(timeit.repeat(cc_jobs[name], number=1, repeat=repeat))
        rows.append({"kernel": name, "python_s": t_py, "compiled_s": t_cc, "speedup": t_py / t_cc})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    print(f"{'kernel':30s} {'python [s]':>11s} {'compiled [s]':>13s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:30s} {r['python_s']:11.4f} {r['compiled_s']:13.5f} {r['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
