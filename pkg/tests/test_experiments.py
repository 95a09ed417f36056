from __future__ import annotations

import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobigg.experiments import (
    ResultTable,
    SchemaError,
    aggregate,
    make_spec,
    parse_config_text,
    pooled_survival,
    read_table,
    run_experiment,
)
from mobigg.experiments.cli import main
from mobigg.experiments.runner import format_cell


def write_cfg(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------- schema


def test_parse_config_text():
    raw = parse_config_text("# comment\nlam = 1.5  # inline\n\nr=0.5\n")
    assert raw == {"lam": "1.5", "r": "0.5"}
    with pytest.raises(SchemaError, match="duplicate"):
        parse_config_text("a=1\na=2\n")
    with pytest.raises(SchemaError, match="line 1"):
        parse_config_text("just words\n")


def test_validation_messages():
    with pytest.raises(SchemaError, match="unknown kind"):
        make_spec("teleport", {}, "x.csv", 0)
    with pytest.raises(SchemaError, match="missing required parameter 'trials'"):
        make_spec("detect", {"lam": "1", "r": "1", "d": "2", "dt": "0.1", "horizon": "1"}, "x.csv", 0)
    with pytest.raises(SchemaError, match="unknown parameter"):
        make_spec("sausage", {"d": "1", "r": "1", "t": "1", "colour": "red"}, "x.csv", 0)
    with pytest.raises(SchemaError, match="expected int"):
        make_spec("sausage", {"d": "1.5", "r": "1", "t": "1"}, "x.csv", 0)
    with pytest.raises(SchemaError, match="one of"):
        make_spec("sausage", {"d": "1", "r": "1", "t": "1", "method": "Guess"}, "x.csv", 0)
    with pytest.raises(SchemaError, match="unsigned 64-bit"):
        make_spec("sausage", {"d": "1", "r": "1", "t": "1"}, "x.csv", 2**64)


def test_defaults_and_typed_values():
    spec = make_spec("sausage", {"d": 1, "r": 1, "t": "0.5"}, "x.csv", 2**64 - 1)
    assert spec.parameters["paths"] == 10000 and spec.parameters["r"] == 1.0
    assert isinstance(spec.parameters["r"], float)
    assert spec.echo()["seed"] == 2**64 - 1


# ---------------------------------------------------------------- CLI


def test_cli_sausage_value(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", "d = 1\nr = 0.5\nt = 1\n")
    out = tmp_path / "s.csv"
    assert main(["sausage", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out, newline="")))
    assert len(rows) == 1
    assert float(rows[0]["volume_mean"]) == pytest.approx(2.5958, rel=0.01)
    meta = json.loads((tmp_path / "s.csv.meta.json").read_text())
    assert meta["spec"]["parameters"]["r"] == 0.5 and meta["seed"] == 3
    assert meta["incomplete"] is False and "wall_time_s" in meta and meta["version"]


def test_cli_detect_zero_intensity(tmp_path):
    cfg = write_cfg(tmp_path / "d.cfg", "lam=0\nr=0.5\nd=2\ndt=0.05\nhorizon=1\ntrials=7\n")
    out = tmp_path / "d.csv"
    assert main(["detect", "--config", cfg, "--seed", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out, newline="")))
    assert len(rows) == 7 and all(r["detected"] == "false" for r in rows)


def test_cli_exit_codes(tmp_path):
    bad = write_cfg(tmp_path / "b.cfg", "lam=-1\nr=0.5\nd=1\ndt=0.01\nhorizon=1\ntrials=5\n")
    out = tmp_path / "b.csv"
    assert main(["detect", "--config", bad, "--seed", "1", "--out", str(out)]) == 2
    assert not out.exists()  # nothing ran
    assert main(["detect", "--config", str(tmp_path / "missing.cfg"), "--seed", "1", "--out", str(out)]) == 2
    assert main(["nope", "--config", bad, "--seed", "1", "--out", str(out)]) == 2
    assert main(["detect", "--config", bad, "--seed", "abc", "--out", str(out)]) == 2
    assert main(["detect", "--config", bad]) == 2
    # precondition failing deep in the module is still a validation error
    perc = write_cfg(tmp_path / "p.cfg", "lam=3\nr=1\nd=2\nside=10\nhorizon=5\ndt=0.3\ntrials=2\n")
    assert main(["perc", "--config", perc, "--seed", "1", "--out", str(out)]) == 2
    assert not out.exists()


def test_cli_runtime_failure_marks_incomplete(tmp_path):
    # voxel grid too large for the default cap: fails while running
    cfg = write_cfg(tmp_path / "v.cfg", "d=3\nr=1\nt=400\ndt=1\npaths=1\nmethod=Voxel\n")
    out = tmp_path / "v.csv"
    assert main(["sausage", "--config", cfg, "--seed", "1", "--out", str(out)]) == 3
    meta = json.loads((tmp_path / "v.csv.meta.json").read_text())
    assert meta["incomplete"] is True and "voxel" in meta["error"]
    assert out.read_text().startswith("d,r,t,dt,paths,method,volume_mean,volume_se")


def test_console_script_entry_point(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", "d=2\nr=1\nt=0.1\ndt=0.01\npaths=20\n")
    out = tmp_path / "s.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "mobigg.experiments.cli", "sausage", "--config", cfg, "--seed", "1", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()


@pytest.mark.parametrize(
    "kind,text,cols",
    [
        ("detect", "lam=1\nr=0.5\nd=2\ndt=0.05\nhorizon=1\ntrials=70\ntarget=brownian\n", "trial,detected,detected_at"),
        ("cover", "set=Segment\nR=2\nepsilon=0.2\nlam=1\nr=1\nd=2\ndt=0.05\nhorizon=5\ntrials=5\n", "trial,covered,cover_time"),
        ("perc", "lam=3\nr=1\nd=2\nside=8\nhorizon=3\ntrials=4\n", "trial,percolated,perc_at"),
        ("broadcast", "n=300\nlam=3\nr=1\nd=2\ntrials=4\nlambda_c=1.49\n", "trial,nodes,finished,t_broad"),
        ("couple", "d=1\nell=4\nbeta=2\neps=0.5\nK_prime=32\nlam=5\nruns=3\n", "run,success,subset_exact"),
        ("density", "lam=2\nd=2\ncube_side=10\ncell_side=2\nxi=0.5\nt=3\nruns=3\n", "run,fraction"),
        ("calibrate", "d=2\nr=1\nside=8\ntrials=6\n", "trial,lambda_c"),
    ],
)
def test_every_kind_runs_and_is_thread_independent(tmp_path, kind, text, cols):
    cfg = write_cfg(tmp_path / "c.cfg", text)
    bodies = []
    for threads in (1, 3):
        out = tmp_path / f"o{threads}.csv"
        assert main([kind, "--config", cfg, "--seed", "42", "--out", str(out), "--threads", str(threads)]) == 0
        bodies.append(out.read_bytes())
    assert bodies[0] == bodies[1]
    assert bodies[0].decode().startswith(cols)
    assert b"\r\n" in bodies[0]


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", "set=Point\nlam=1\nr=0.5\nd=1\ndt=0.01\nhorizon=3\ntrials=130\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}.csv"
        assert main(["cover", "--config", cfg, "--seed", "5", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


# ---------------------------------------------------------------- tables


def test_format_cell_and_quoting():
    assert format_cell(None) == "" and format_cell(True) == "true" and format_cell(np.int64(3)) == "3"
    assert format_cell(0.1) == "0.1" and format_cell(math.inf) == "inf"
    t = ResultTable(("a", "b"), [{"a": "x,y", "b": 'say "hi"'}])
    assert t.csv_text() == 'a,b\r\n"x,y","say ""hi"""\r\n'
    with pytest.raises(Exception):
        ResultTable(("a",), [{"b": 1}])


def _table(values, col="x"):
    return ResultTable(("trial", col), [{"trial": i, col: v} for i, v in enumerate(values)])


def test_aggregate_single_table_identity():
    agg = aggregate([_table([1.0, 2.0, 6.0])])
    row = agg.rows[0]
    assert row["column"] == "x" and row["n"] == 3 and row["mean"] == pytest.approx(3.0)
    assert row["std_error"] == pytest.approx(math.sqrt(7.0 / 3))


def test_aggregate_equal_sizes_average_means():
    a, b = _table([1.0, 3.0]), _table([10.0, 14.0])
    assert aggregate([a, b]).rows[0]["mean"] == pytest.approx((2.0 + 12.0) / 2)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), min_size=1, max_size=5),
    st.randoms(use_true_random=False),
)
def test_aggregate_is_order_free(groups, rnd):
    tables = [_table(g) for g in groups]
    perm = tables[:]
    rnd.shuffle(perm)
    assert aggregate(tables).rows == aggregate(perm).rows
    # associativity: pooling pooled rows is pooling everything
    merged = _table([v for g in groups for v in g])
    assert aggregate(tables).rows == aggregate([merged]).rows


def test_aggregate_schema_mismatch_names_columns():
    with pytest.raises(SchemaError, match="x, y"):
        aggregate([_table([1.0], "x"), _table([1.0], "y")])


def test_aggregate_weighted_se_columns():
    t = ResultTable(
        ("paths", "volume_mean", "volume_se"),
        [{"paths": 100, "volume_mean": 2.0, "volume_se": 0.1}, {"paths": 300, "volume_mean": 4.0, "volume_se": 0.05}],
    )
    rows = {r["column"]: r for r in aggregate([t]).rows}
    assert rows["volume_mean"]["mean"] == pytest.approx(3.5)
    assert rows["volume_mean"]["std_error"] == pytest.approx(math.sqrt(10**2 + 15**2) / 400)


def test_read_back_and_pooled_survival(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", "lam=1\nr=0.5\nd=1\ndt=0.05\nhorizon=1\ntrials=40\n")
    tabs = []
    for seed in (1, 2):
        out = tmp_path / f"t{seed}.csv"
        assert main(["detect", "--config", cfg, "--seed", str(seed), "--out", str(out)]) == 0
        tabs.append(read_table(out))
    assert tabs[0].schema == ("trial", "detected", "detected_at")
    assert tabs[0].metadata["seed"] == 1
    curve = pooled_survival(tabs, "detected_at", 1.0, 0.05)
    assert curve.trials == 80 and np.all(np.diff(curve.survival) <= 0)
    frac = aggregate(tabs).rows[0]
    assert frac["column"] == "detected" and 0 <= frac["mean"] <= 1
    in_mem = run_experiment(make_spec("detect", parse_config_text((tmp_path / "c.cfg").read_text()), "unused", 1), write=False)
    assert [format_cell(r["detected_at"]) for r in in_mem.rows] == tabs[0].column("detected_at")
