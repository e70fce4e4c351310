import csv
import json

import pytest

from confreach.cli import PipelineConfig, main, make_splits, report_digest, substream_seed
from confreach.core import ConfigurationError, Dataset

TINY = {
    "data": {"n_total": 300},
    "partition": {
        "m": [1, 3],
        "methods": ["GA+ETDL", "SA+EL"],
        "ga": {"budget": 40, "population": 8},
        "sa": {"budget": 40},
    },
    "verify": {"subdivisions": 3},
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(TINY))
    for key, value in (extra or {}).items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_split_sizes():
    assert PipelineConfig({"data": {"n_total": 10}}).split_sizes() == {
        "total": 10, "cal": 5, "test": 5, "reg": 1, "conf": 4, "base_alpha": 1, "base_conf": 4}
    full = PipelineConfig(paper_scale=True).split_sizes()
    assert (full["cal"], full["test"], full["reg"], full["conf"]) == (2000, 2000, 500, 1500)
    assert (full["base_alpha"], full["base_conf"]) == (100, 1900)
    assert PipelineConfig(paper_scale=True).raw["verify"]["subdivisions"] == 200


def test_splits_disjoint_and_exhaustive():
    sizes = PipelineConfig({"data": {"n_total": 37}}).split_sizes()
    sp = make_splits(37, sizes, 5)
    assert sorted(sp.cal + sp.test) == list(range(37))
    assert sorted(sp.reg + sp.conf) == sp.cal and sorted(sp.base_alpha + sp.base_conf) == sp.cal
    assert len(sp.reg) == sizes["reg"] and len(sp.base_alpha) == sizes["base_alpha"]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PipelineConfig({"data": {"n_total": 1}})
    with pytest.raises(ConfigurationError):
        PipelineConfig({"alpha": 1.5})
    with pytest.raises(ConfigurationError):
        PipelineConfig({"partition": {"methods": ["GA+L2"]}})
    with pytest.raises(ConfigurationError):
        PipelineConfig({"partition": {"ga": {"budget": 10, "temperature": 3}}})
    with pytest.raises(ConfigurationError):
        PipelineConfig({"verify": {"merge_strategy": "Lazy"}})
    assert PipelineConfig({"output_dir": "a"}).digest() == PipelineConfig({"output_dir": "b"}).digest()


def test_substreams_are_distinct():
    seeds = {substream_seed(0, n) for n in ("dataset", "splits", "GA/ETDL/M3", "SA/EL/M3")}
    assert len(seeds) == 4
    assert substream_seed(0, "dataset") == substream_seed(0, "dataset") != substream_seed(1, "dataset")


def test_generate_small(tmp_path):
    cfg = write_config(tmp_path, {"data": {"n_total": 10}})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    d = tmp_path / "o" / "data"
    assert len(Dataset.load(d / "dataset.json")) == 10
    assert len(Dataset.load(d / "cal.json")) == 5 and len(Dataset.load(d / "test.json")) == 5
    first = files(tmp_path / "o")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert files(tmp_path / "o") == first


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root)
    assert main(["run", "--config", str(cfg), "--out", str(root / "a")]) == 0
    return root, cfg


def test_calibrate_outputs(pipeline):
    root, _ = pipeline
    bdir = root / "a" / "bounds"
    index = json.loads((bdir / "index.json").read_text())["bounds"]
    assert index == ["time", "uniform_M1", "uniform_M3", "GA_ETDL_M3", "SA_EL_M3"]
    time = json.loads((bdir / "time.json").read_text())
    assert time["type"] == "time" and len(time["bounds"]) == 91
    ga = json.loads((bdir / "GA_ETDL_M3.json").read_text())
    assert len(ga["bounds"]) == 3 and len(ga["edges"]) == 2
    assert len(ga["loss_history"]) == 40
    assert all(a >= b for a, b in zip(ga["loss_history"], ga["loss_history"][1:]))
    for name in index:
        rec = json.loads((bdir / f"{name}.json").read_text())
        assert 0.0 <= rec["coverage_on_test"] <= 1.0


def test_report_rows(pipeline):
    root, _ = pipeline
    rdir = root / "a" / "report"
    report = json.loads((rdir / "report.json").read_text())
    assert [r["name"] for r in report["rows"]] == ["time", "uniform_M1", "uniform_M3", "GA_ETDL_M3", "SA_EL_M3"]
    digest = report["provenance"]["config_digest"]
    assert all(r["config_digest"] == digest for r in report["rows"])
    assert report["digest"] == report_digest(report)
    prov = report["provenance"]
    assert {"seed", "toolkit_version", "substreams", "kernel_backend"} <= set(prov)
    for r in report["rows"][1:]:
        assert len(r["state_tighter_than_baseline"]) == 91 or r["status"] != "ok"
    rows = list(csv.reader((rdir / "state_tighter_than_baseline.csv").open()))
    assert rows[0] == ["k", "uniform_M1", "uniform_M3", "GA_ETDL_M3", "SA_EL_M3"]
    assert {c for row in rows[1:] for c in row[1:]} <= {"true", "false", ""}
    table = (rdir / "table.txt").read_text().splitlines()
    assert len(table) == 2 + 5 and table[0].startswith("name")
    tube = list(csv.reader((root / "a" / "tubes" / "time.csv").open()))
    assert tube[0][0] == "k" and len(tube) >= 2


def test_pipeline_determinism(pipeline):
    root, cfg = pipeline
    assert main(["run", "--config", str(cfg), "--out", str(root / "b")]) == 0
    a, b = files(root / "a"), files(root / "b")
    assert a.keys() == b.keys()
    for name in a:
        if not name.endswith(".timing.json") and not name.startswith("report/"):
            assert a[name] == b[name], name
    ra = json.loads(a["report/report.json"])
    rb = json.loads(b["report/report.json"])
    assert ra["digest"] == rb["digest"]


def test_rerun_single_stage(pipeline, tmp_path):
    root, cfg = pipeline
    out = root / "a"
    before = (out / "tubes" / "uniform_M3.json").read_bytes()
    assert main(["verify", "--config", str(cfg), "--out", str(out), "--bound", "uniform_M3"]) == 0
    assert (out / "tubes" / "uniform_M3.json").read_bytes() == before


def test_single_method_single_row(tmp_path):
    cfg = write_config(tmp_path, {"partition": {"m": [1], "baseline": False, "methods": []}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report" / "report.json").read_text())
    assert len(report["rows"]) == 1 and "state_tighter_than_baseline" not in report["rows"][0]


def test_merge_sweep_rows(tmp_path):
    cfg = write_config(tmp_path, {
        "partition": {"m": [3], "baseline": False, "methods": []},
        "verify": {"merge_sweep": {"bound": "uniform_M3"}},
    })
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = json.loads((tmp_path / "o" / "report" / "report.json").read_text())["rows"]
    strategies = {r["name"]: r["merge_strategy"] for r in rows}
    assert strategies["uniform_M3__NoMerge"] == "NoMerge" and strategies["uniform_M3__GreedyMerge"] == "GreedyMerge"
    by = {r["name"]: r for r in rows}
    assert by["uniform_M3__OppMerge"]["max_set_size"] == pytest.approx(by["uniform_M3__NoMerge"]["max_set_size"], abs=1e-12)
    assert by["uniform_M3__OppMerge"]["total_branches"] <= by["uniform_M3__NoMerge"]["total_branches"]


def test_exit_code_usage(tmp_path, capsys):
    assert main(["calibrate", "--config", str(write_config(tmp_path, {"alpha": 2.0}))]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_exit_code_io(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, {"data": {"n_total": 10}})
    assert main(["generate", "--config", str(cfg), "--out", str(blocker / "sub")]) == 3
    assert main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "missing")]) == 3


def test_exit_code_infeasible(tmp_path):
    # 15 conformal trajectories cannot certify 1 - 0.05/3, so uniform M=3 has infinite bounds
    cfg = write_config(tmp_path, {"data": {"n_total": 40}, "partition": {"m": [3], "baseline": False, "methods": []}})
    out = tmp_path / "o"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["calibrate", "--config", str(cfg), "--out", str(out)]) == 0
    rec = json.loads((out / "bounds" / "uniform_M3.json").read_text())
    assert "inf" in rec["bounds"]
    assert main(["verify", "--config", str(cfg), "--out", str(out)]) == 2
    tube = json.loads((out / "tubes" / "uniform_M3.json").read_text())
    assert tube["status"] == "infeasible" and tube["infeasible_region"] is not None
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0


@pytest.mark.slow
def test_coverage_column_at_paper_scale_splits(tmp_path):
    """Every fitted bound keeps coverage >= 1 - alpha - 0.02 on 2000 test trajectories."""
    cfg = write_config(tmp_path, {
        "data": {"n_total": 4000},
        "partition": {"m": [1, 3, 5], "methods": ["GA+ETDL", "SA+EL"], "ga": {"budget": 150, "population": 15},
                      "sa": {"budget": 150}},
    })
    out = tmp_path / "o"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["calibrate", "--config", str(cfg), "--out", str(out)]) == 0
    for path in (out / "bounds").glob("*.json"):
        if path.name == "index.json":
            continue
        rec = json.loads(path.read_text())
        assert rec["coverage_on_test"] >= 0.95 - 0.02, path.name
