"""Command line pipeline: generate -> calibrate -> verify -> report.

Every stage reads and writes files under the output directory, so stages
can be rerun independently::

    toolkit generate  --config cfg.json
    toolkit calibrate --config cfg.json
    toolkit verify    --config cfg.json
    toolkit report    --config cfg.json

``toolkit run`` chains all four.  Exit codes: 0 success, 1 usage or
configuration error, 2 infeasible verification, 3 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, kernels
from .conformal import (
    EtaFunction,
    bound_from_json,
    fit_eta,
    fit_time_baseline,
    validate_coverage,
)
from .core import ConfigurationError, Dataset, InputError, Interval, ToolkitError, atomic_write
from .partition import LossSpec, OptimizerSpec, loss_etdl, optimize_partition, uniform_partition
from .reach import MERGE_STRATEGIES, ReachTube, VerifySpec, compute_reach_tube
from .system import MountainCarParams, NoiseProfile, controller_from_json, generate_dataset

log = logging.getLogger("confreach")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "alpha": 0.05,
    "horizon": 90,
    "output_dir": "toolkit_out",
    "system": {
        "params": {},
        "controller": {"type": "default"},
        "noise": {},
        "initial_set": [-0.55, -0.45],
    },
    "data": {
        "n_total": 1000,
        "cal_fraction": 0.5,
        "reg_fraction": 0.25,
        "baseline_alpha_fraction": 0.05,
    },
    "partition": {
        "m": [1, 2, 3, 5],
        "methods": ["GA+ETDL", "GA+EL", "SA+ETDL", "SA+EL"],
        "uniform": True,
        "baseline": True,
        "decay": 0.9,
        "ga": {"budget": 750, "population": 30, "mutation_rate": 0.3},
        "sa": {"budget": 1500, "initial_temperature": None, "cooling_rate": 0.995},
    },
    "verify": {
        "initial_set": [-0.51, -0.49],
        "subdivisions": 50,
        "merge_strategy": "OppMerge",
        "normalize_period": 5,
        "greedy_threshold": 8,
        "max_branches": 512,
        "merge_sweep": None,
    },
}

GA_KNOBS = {"budget", "population", "mutation_rate"}
SA_KNOBS = {"budget", "initial_temperature", "cooling_rate"}

PAPER_SCALE = {
    "data": {"n_total": 4000},
    "partition": {"m": [1, 2, 3, 4, 5, 6, 7], "ga": {"budget": 1500}},
    "verify": {"subdivisions": 200},
}


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def substream_seed(master: int, name: str) -> int:
    """Seed for the named random substream of a master seed."""
    seq = np.random.SeedSequence(master, spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, np.uint32)[0])


@dataclass
class Splits:
    cal: list[int]
    test: list[int]
    reg: list[int]
    conf: list[int]
    base_alpha: list[int]
    base_conf: list[int]

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("cal", "test", "reg", "conf", "base_alpha", "base_conf")}


class PipelineConfig:
    """Resolved pipeline configuration (defaults, the optional --paper-scale profile, overrides)."""

    def __init__(self, raw: dict | None = None, *, paper_scale: bool = False, base_dir: Path | None = None):
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        if paper_scale:
            _deep_update(cfg, copy.deepcopy(PAPER_SCALE))
        _deep_update(cfg, copy.deepcopy(raw or {}))
        self.raw = cfg
        self.base_dir = base_dir or Path.cwd()
        self._validate()

    @classmethod
    def load(cls, path: str | Path | None, *, paper_scale: bool = False) -> PipelineConfig:
        if path is None:
            return cls(paper_scale=paper_scale)
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        return cls(raw, paper_scale=paper_scale, base_dir=path.parent)

    def _validate(self) -> None:
        c = self.raw
        if not 0 < c["alpha"] < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if int(c["horizon"]) < 1:
            raise ConfigurationError("horizon must be >= 1")
        self.split_sizes()
        for m in c["partition"]["m"]:
            if int(m) < 1:
                raise ConfigurationError("every M must be >= 1")
        for method in c["partition"]["methods"]:
            self.parse_method(method)
        for kind, allowed in (("ga", GA_KNOBS), ("sa", SA_KNOBS)):
            unknown = set(c["partition"][kind]) - allowed
            if unknown:
                raise ConfigurationError(f"unknown {kind} settings: {sorted(unknown)}")
        if c["verify"]["merge_strategy"] not in MERGE_STRATEGIES:
            raise ConfigurationError(f"merge_strategy must be one of {MERGE_STRATEGIES}")
        self.params, self.profile, self.controller = self.system()

    @staticmethod
    def parse_method(name: str) -> tuple[str, str]:
        try:
            opt, loss = name.upper().split("+")
        except ValueError:
            raise ConfigurationError(f"method {name!r} is not of the form OPT+LOSS") from None
        if opt not in ("GA", "SA") or loss not in ("EL", "ETDL"):
            raise ConfigurationError(f"unknown method {name!r}")
        return opt, loss

    def system(self):
        s = self.raw["system"]
        try:
            params = MountainCarParams.from_json(s.get("params", {}))
            profile = NoiseProfile.from_json(s.get("noise", {}))
            ctrl = controller_from_json(s.get("controller", {"type": "default"}), self.base_dir)
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f"bad system config: {exc}") from exc
        return params, profile, ctrl

    def split_sizes(self) -> dict[str, int]:
        d = self.raw["data"]
        n = int(d["n_total"])
        n_cal = round(n * float(d["cal_fraction"]))
        n_reg = round(n_cal * float(d["reg_fraction"]))
        n_alpha = max(1, round(n_cal * float(d["baseline_alpha_fraction"])))
        sizes = {"total": n, "cal": n_cal, "test": n - n_cal, "reg": n_reg, "conf": n_cal - n_reg,
                 "base_alpha": n_alpha, "base_conf": n_cal - n_alpha}
        bad = [k for k, v in sizes.items() if v < 1]
        if bad:
            raise ConfigurationError(f"split sizes must all be >= 1 (empty: {', '.join(bad)})")
        return sizes

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def digest(self) -> str:
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return _digest(body)


# ---------------------------------------------------------------------------
# stage helpers


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write_json(path: Path, obj: Any) -> None:
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _jsonable(x: float) -> Any:
    return "inf" if isinstance(x, float) and math.isinf(x) else x


def make_splits(n: int, sizes: dict[str, int], seed: int) -> Splits:
    perm = np.random.default_rng(seed).permutation(n).tolist()
    cal, test = sorted(perm[: sizes["cal"]]), sorted(perm[sizes["cal"]:])
    inner = np.random.default_rng(seed + 1).permutation(cal).tolist()
    reg, conf = sorted(inner[: sizes["reg"]]), sorted(inner[sizes["reg"]:])
    inner = np.random.default_rng(seed + 2).permutation(cal).tolist()
    base_alpha, base_conf = sorted(inner[: sizes["base_alpha"]]), sorted(inner[sizes["base_alpha"]:])
    return Splits(cal, test, reg, conf, base_alpha, base_conf)


def cmd_generate(cfg: PipelineConfig) -> int:
    sizes = cfg.split_sizes()
    lo, hi = cfg.raw["system"]["initial_set"]
    data = generate_dataset(
        sizes["total"], Interval(lo, hi), cfg.controller, cfg.profile, cfg.params, int(cfg.raw["horizon"]),
        substream_seed(cfg.seed, "dataset"),
    )
    splits = make_splits(len(data), sizes, substream_seed(cfg.seed, "splits"))
    d = cfg.out / "data"
    data.save(d / "dataset.json")
    data.subset(splits.cal).save(d / "cal.json")
    data.subset(splits.test).save(d / "test.json")
    _write_json(d / "splits.json", {"config_digest": cfg.digest(), **splits.to_json()})
    log.info("wrote %d trajectories (%s)", len(data), ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


def _load_data(cfg: PipelineConfig) -> tuple[Dataset, Splits]:
    d = cfg.out / "data"
    data = Dataset.load(d / "dataset.json")
    raw = _read_json(d / "splits.json")
    try:
        splits = Splits(*(raw[k] for k in ("cal", "test", "reg", "conf", "base_alpha", "base_conf")))
    except KeyError as exc:
        raise InputError(f"splits.json lacks the {exc} split") from exc
    return data, splits


def _bound_record(name, method, m, bound, cfg, test, *, loss=None, history=None, opt=None, loss_spec=None) -> dict:
    rec = bound.to_json()
    rec.update({
        "name": name,
        "method": method,
        "m": m,
        "coverage_on_test": validate_coverage(bound, test),
        "loss": _jsonable(loss) if loss is not None else None,
        "loss_history": [_jsonable(x) for x in history] if history is not None else None,
        "config_digest": cfg.digest(),
    })
    if isinstance(bound, EtaFunction):
        rec["edges"] = list(bound.partition.edges)
    if opt is not None:
        rec["optimizer"] = {"kind": opt.kind, "budget": opt.budget, "seed": opt.seed,
                            "population": opt.population, "mutation_rate": opt.mutation_rate,
                            "initial_temperature": opt.initial_temperature, "cooling_rate": opt.cooling_rate}
    if loss_spec is not None:
        rec["loss_spec"] = {"kind": loss_spec.kind, "decay": loss_spec.decay_base}
    return rec


def cmd_calibrate(cfg: PipelineConfig) -> int:
    data, sp = _load_data(cfg)
    alpha, horizon = float(cfg.raw["alpha"]), int(cfg.raw["horizon"])
    part = cfg.raw["partition"]
    cal, reg, conf, test = data.subset(sp.cal), data.subset(sp.reg), data.subset(sp.conf), data.subset(sp.test)
    decay = float(part["decay"])
    records = []

    if part.get("baseline", True):
        tb = fit_time_baseline(data.subset(sp.base_alpha), data.subset(sp.base_conf), alpha, horizon)
        records.append(_bound_record("time", "time", None, tb, cfg, test))

    for m in sorted(int(x) for x in part["m"]):
        if part.get("uniform", True):
            # no regions to synthesize, so the whole calibration split feeds the bound
            partition = uniform_partition(m)
            eta = fit_eta(cal, partition, alpha)
            loss = loss_etdl(reg, partition, eta, decay)
            records.append(_bound_record(f"uniform_M{m}", "uniform", m, eta, cfg, test, loss=loss))
        if m < 2:
            continue
        for method in part["methods"]:
            opt_kind, loss_kind = cfg.parse_method(method)
            loss_spec = LossSpec(loss_kind, decay)
            knobs = dict(part["ga"] if opt_kind == "GA" else part["sa"])
            opt = OptimizerSpec(opt_kind, seed=substream_seed(cfg.seed, f"{opt_kind}/{loss_kind}/M{m}"), **knobs)
            res = optimize_partition(reg, conf, m, loss_spec, opt, alpha)
            name = f"{opt_kind}_{loss_kind}_M{m}"
            records.append(_bound_record(name, f"{opt_kind}+{loss_kind}", m, res.eta, cfg, test,
                                         loss=res.loss, history=res.loss_history, opt=opt, loss_spec=loss_spec))
            log.info("%s: loss %.6g edges %s", name, res.loss, res.partition.edges)

    bdir = cfg.out / "bounds"
    for rec in records:
        _write_json(bdir / f"{rec['name']}.json", rec)
    _write_json(bdir / "index.json", {"config_digest": cfg.digest(), "bounds": [r["name"] for r in records]})
    return EXIT_OK


def _verify_spec(cfg: PipelineConfig, bound, strategy: str | None = None) -> VerifySpec:
    v = cfg.raw["verify"]
    return VerifySpec(
        bound, Interval(*v["initial_set"]), int(v["subdivisions"]), int(cfg.raw["horizon"]), cfg.controller,
        cfg.params, strategy or v["merge_strategy"], int(v["normalize_period"]), int(v["greedy_threshold"]),
        int(v["max_branches"]),
    )


def _write_tube(cfg: PipelineConfig, name: str, bound_name: str, tube: ReachTube, bound_digest: str) -> None:
    tdir = cfg.out / "tubes"
    doc = tube.to_json(include_timing=False)
    doc["bound"] = bound_name
    doc["config_digest"] = cfg.digest()
    doc["bound_digest"] = bound_digest
    _write_json(tdir / f"{name}.json", doc)
    atomic_write(tdir / f"{name}.csv", tube.to_csv())
    # timings are machine-dependent; keep them out of the deterministic tube file
    _write_json(tdir / f"{name}.timing.json", {"wall_time": tube.wall_time})


def cmd_verify(cfg: PipelineConfig, bound_names: list[str] | None = None) -> int:
    bdir = cfg.out / "bounds"
    names = bound_names or _read_json(bdir / "index.json")["bounds"]
    infeasible = []
    jobs = [(n, None) for n in names]
    sweep = cfg.raw["verify"].get("merge_sweep")
    if sweep and not bound_names:
        jobs += [(sweep["bound"], s) for s in sweep.get("strategies", MERGE_STRATEGIES)]
    for name, strategy in jobs:
        raw = _read_json(bdir / f"{name}.json")
        bound = bound_from_json(raw)
        tube = compute_reach_tube(_verify_spec(cfg, bound, strategy))
        out_name = name if strategy is None else f"{name}__{strategy}"
        _write_tube(cfg, out_name, name, tube, _digest(raw))
        log.info("%s: max set size %.6g (%s)", out_name, tube.max_set_size, tube.status)
        if tube.status != "ok":
            infeasible.append(f"{out_name} (region {tube.infeasible_region}, step {tube.infeasible_step})")
    if infeasible:
        print("infeasible verification: " + "; ".join(infeasible), file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

REPORT_COLUMNS = ("name", "method", "m", "merge_strategy", "max_set_size", "wall_time", "coverage_on_test",
                  "loss", "total_branches", "status", "edges", "bounds", "config_digest")


def build_report(cfg: PipelineConfig) -> dict:
    tdir, bdir = cfg.out / "tubes", cfg.out / "bounds"
    tube_files = sorted(p for p in tdir.glob("*.json") if not p.name.endswith(".timing.json"))
    if not tube_files:
        raise FileNotFoundError(f"no tubes in {tdir}")
    order = _read_json(bdir / "index.json")["bounds"]
    tube_files.sort(key=lambda p: (order.index(p.stem.split("__")[0]) if p.stem.split("__")[0] in order else len(order), p.stem))
    rows, widths = [], {}
    for path in tube_files:
        tube = _read_json(path)
        bound = _read_json(bdir / f"{tube['bound']}.json")
        timing = _read_json(path.with_suffix(".timing.json")) if path.with_suffix(".timing.json").exists() else {}
        name = path.stem
        widths[name] = [r["pos_width"] for r in tube["per_step"]]
        rows.append({
            "name": name,
            "method": bound["method"],
            "m": bound["m"],
            "merge_strategy": tube["metrics"]["merge_strategy"],
            "max_set_size": tube["metrics"]["max_set_size"],
            "wall_time": timing.get("wall_time"),
            "coverage_on_test": bound["coverage_on_test"],
            "loss": bound["loss"],
            "total_branches": tube["metrics"]["total_branches"],
            "status": tube["status"],
            "edges": bound.get("edges", []),
            "bounds": bound["bounds"],
            "config_digest": tube["config_digest"],
            "tube_digest": tube["spec_digest"],
        })
    baseline = widths.get("time")
    for row in rows:
        if baseline is not None and row["method"] not in ("time",):
            w = widths[row["name"]]
            row["state_tighter_than_baseline"] = [
                a < b for a, b in zip(w, baseline)
            ]
    report = {
        "rows": rows,
        "provenance": {
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "substreams": {k: substream_seed(cfg.seed, k) for k in ("dataset", "splits")},
            "toolkit_version": __version__,
        },
    }
    report["digest"] = report_digest(report)
    report["provenance"]["kernel_backend"] = kernels.BACKEND
    return report


def report_digest(report: dict) -> str:
    """Digest of a report with timing and machine details removed."""
    rows = [{k: v for k, v in r.items() if k != "wall_time"} for r in report["rows"]]
    prov = {k: v for k, v in report["provenance"].items() if k != "kernel_backend"}
    return _digest({"rows": rows, "provenance": prov})


def _fmt(x: Any) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def format_table(report: dict) -> str:
    cols = ("name", "method", "m", "merge_strategy", "max_set_size", "coverage_on_test", "loss", "total_branches",
            "wall_time", "status")
    table = [cols] + [tuple(_fmt(r[c]) for c in cols) for r in report["rows"]]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(cfg: PipelineConfig) -> int:
    report = build_report(cfg)
    rdir = cfg.out / "report"
    _write_json(rdir / "report.json", report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report["rows"]:
        w.writerow([json.dumps(r[c]) if isinstance(r[c], list) else r[c] for c in REPORT_COLUMNS])
    atomic_write(rdir / "report.csv", buf.getvalue())
    table = format_table(report)
    atomic_write(rdir / "table.txt", table)
    baseline_rows = [r for r in report["rows"] if "state_tighter_than_baseline" in r]
    if baseline_rows:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k"] + [r["name"] for r in baseline_rows])
        n = max(len(r["state_tighter_than_baseline"]) for r in baseline_rows)
        for k in range(n):
            w.writerow([k] + [_tight_cell(r["state_tighter_than_baseline"], k) for r in baseline_rows])
        atomic_write(rdir / "state_tighter_than_baseline.csv", buf.getvalue())
    sys.stdout.write(table)
    print(f"report digest {report['digest']}")
    return EXIT_OK


def _tight_cell(flags: list[bool], k: int) -> str:
    return "" if k >= len(flags) else str(flags[k]).lower()


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="toolkit", description="Conformal perception bounds and reach tubes for the mountain car.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (
        ("generate", "simulate the dataset and write the split files"),
        ("calibrate", "fit uniform, optimized and time-baseline bounds"),
        ("verify", "compute reach tubes for the fitted bounds"),
        ("report", "tabulate tubes and bounds"),
        ("run", "all four stages in order"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="pipeline config JSON (defaults used when omitted)")
        p.add_argument("--paper-scale", action="store_true", help="4000 trajectories, 200 subdivisions, M = 1..7")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            p.add_argument("--bound", action="append", help="bound name to verify (repeatable; default all)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = PipelineConfig.load(args.config, paper_scale=args.paper_scale)
        overrides = {}
        if args.out is not None:
            overrides["output_dir"] = str(args.out.resolve())
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = PipelineConfig(_deep_update(cfg.raw, overrides), base_dir=cfg.base_dir)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.bound)
        if args.command == "report":
            return cmd_report(cfg)
        cmd_generate(cfg)
        cmd_calibrate(cfg)
        code = cmd_verify(cfg)
        cmd_report(cfg)
        return code
    except (ConfigurationError, InputError) as exc:
        print(f"toolkit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"toolkit: {exc}", file=sys.stderr)
        return EXIT_IO
    except ToolkitError as exc:
        print(f"toolkit: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
