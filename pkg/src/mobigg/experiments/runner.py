"""Experiment dispatch, CSV / JSON emission and pooling of result tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import __version__
from ..core.config import InvalidInput
from ..core.motion import Trajectory
from ..core.parallel import default_threads, map_trials
from ..core.stats import TailCurve, tail_from_steps
from .schema import ExperimentSpec, SchemaError

CHUNK = 64  # trials per streamed chunk


@dataclass
class ResultTable:
    schema: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.schema = tuple(self.schema)
        for row in self.rows:
            if set(row) != set(self.schema):
                raise InvalidInput(f"row keys {sorted(row)} do not match the schema {list(self.schema)}")

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.schema)
        for row in self.rows:
            w.writerow([format_cell(row[c]) for c in self.schema])
        return buf.getvalue()


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- jobs


@dataclass
class Job:
    columns: tuple
    units: int  # trials / runs; 1 for single-shot kinds
    chunk: Callable  # (indices, threads) -> list of rows
    summary: Callable | None = None  # rows -> dict for the metadata


def _t(steps, dt):
    return None if steps < 0 else float(steps * dt)


def _detect(p, seed):
    from ..detection import _check, detection_config, detection_steps

    target = Trajectory.brownian() if p["target"] == "brownian" else Trajectory.stationary()
    config = detection_config(p["lam"], p["r"], p["d"], p["dt"], p["horizon"], target=target, seed=seed)
    _check(config, [config.lam])

    def chunk(idx, threads):
        steps = detection_steps(config, [target], idx, threads=threads)[:, 0, 0]
        return [{"trial": i, "detected": bool(s >= 0), "detected_at": _t(s, config.dt)} for i, s in zip(idx, steps)]

    def summary(rows):
        steps = np.array([-1 if r["detected_at"] is None else round(r["detected_at"] / config.dt) for r in rows])
        tail = tail_from_steps(steps, config.n_steps, config.dt)
        return {"survival_at_horizon": float(tail.survival[-1]), "trials": len(rows)}

    return Job(("trial", "detected", "detected_at"), p["trials"], chunk, summary)


def _cover(p, seed):
    from ..coverage import _check, build_target, coupled_cover_steps, coverage_config

    target = build_target(
        p["set"], p["R"], p["epsilon"], d=p["d"], level=p["level"] if p["set"] == "CantorIterate" else None
    )
    config = coverage_config(target, p["lam"], p["r"], p["dt"], p["horizon"], seed=seed)
    _check(target, config)
    rad = config.r - target.epsilon

    def chunk(idx, threads):
        steps = map_trials(lambda tr: coupled_cover_steps(config, [(target, rad)], tr)[0, 0], idx, threads)
        return [{"trial": i, "covered": bool(s >= 0), "cover_time": _t(s, config.dt)} for i, s in zip(idx, steps)]

    def summary(rows):
        done = [r["cover_time"] for r in rows if r["cover_time"] is not None]
        return {
            "net_points": len(target),
            "net_epsilon": target.epsilon,
            "censored": len(rows) - len(done),
            "unreliable": len(rows) - len(done) > 0.5 * len(rows),
            "mean_cover_time": math.fsum(done) / len(done) if done else None,
        }

    return Job(("trial", "covered", "cover_time"), p["trials"], chunk, summary)


def _perc(p, seed):
    from ..percolation import _steps_per_unit, perc_config, perc_steps

    config = perc_config(p["lam"], p["r"], p["d"], p["side"], p["horizon"], dt=p["dt"], seed=seed)
    _steps_per_unit(config.dt)
    config.check_buffer()

    def chunk(idx, threads):
        steps = perc_steps(config, p["side"], idx, threads=threads)[:, 0]
        return [{"trial": i, "percolated": bool(s >= 0), "perc_at": None if s < 0 else int(s)} for i, s in zip(idx, steps)]

    return Job(("trial", "percolated", "perc_at"), p["trials"], chunk)


def _broadcast(p, seed):
    from ..broadcast import _gate, broadcast_trial

    lc = p["lambda_c"] or None
    _gate(p["lam"], p["d"], p["r"], lc)

    def chunk(idx, threads):
        res = map_trials(
            lambda tr: broadcast_trial(p["n"], p["lam"], p["r"], p["d"], seed=seed, trial=tr, max_steps=p["max_steps"]),
            idx,
            threads,
        )
        return [
            {
                "trial": i,
                "nodes": b.nodes,
                "finished": b.steps is not None,
                "t_broad": b.steps,
                "resampled": b.resampled,
                "giant_pairs": b.giant_pairs,
                "giant_overlaps": b.giant_overlaps,
            }
            for i, b in zip(idx, res)
        ]

    def summary(rows):
        t = [r["t_broad"] for r in rows if r["t_broad"] is not None]
        return {"median_t_broad": float(np.median(t)) if t else None, "unfinished": len(rows) - len(t)}

    cols = ("trial", "nodes", "finished", "t_broad", "resampled", "giant_pairs", "giant_overlaps")
    return Job(cols, p["trials"], chunk, summary)


def _sausage(p, seed):
    from ..sausage import SausageSpec, sausage_volume

    spec = SausageSpec(p["d"], p["r"], p["t"])
    method = None if p["method"] == "auto" else p["method"]

    def chunk(idx, threads):
        est = sausage_volume(spec, p["paths"], p["dt"], method=method, seed=seed, samples_per_path=p["samples_per_path"])
        return [
            {
                "d": p["d"],
                "r": p["r"],
                "t": p["t"],
                "dt": p["dt"],
                "paths": est.paths,
                "method": est.method.value,
                "volume_mean": est.mean,
                "volume_se": est.std_error,
            }
        ]

    return Job(("d", "r", "t", "dt", "paths", "method", "volume_mean", "volume_se"), 1, chunk)


def _couple(p, seed):
    from ..percolation import CouplingSpec, dense_phi0, run_coupling, subbox_counts

    if (p["K"] > 0) != (p["Delta"] > 0):
        raise SchemaError("couple: give both K and Delta, or neither")
    if p["K"] > 0:
        spec = CouplingSpec(p["K"], p["K_prime"], p["ell"], p["beta"], p["eps"], p["Delta"], p["d"])
    else:
        spec = CouplingSpec.smallest(p["d"], p["ell"], p["beta"], p["eps"], p["K_prime"])
    lam = p["lam"] or None

    def one(tr):
        phi0 = dense_phi0(spec, lam, seed=seed, trial=tr)
        res = run_coupling(spec, phi0, seed=seed, trial=tr)
        inside = subbox_counts(np.asarray(phi0.positions), spec.K_prime, 1)[0]
        dg = res.diagnostics
        return {
            "run": tr,
            "success": res.success,
            "subset_exact": bool(dg["subset_exact"]),
            "xi_count": int(dg["xi_count"]),
            "phi0_count": int(inside),
            "paired": dg["paired"],
            "thinned": dg["thinned"],
        }

    def summary(rows):
        ok = [r for r in rows if r["success"]]
        return {
            "K": spec.K,
            "Delta": spec.Delta,
            "psi": spec.psi(),
            "success_rate": len(ok) / len(rows) if rows else None,
            "expected_xi_count": (1 - spec.eps) * spec.beta * spec.K_prime**spec.d,
        }

    cols = ("run", "success", "subset_exact", "xi_count", "phi0_count", "paired", "thinned")
    return Job(cols, p["runs"], lambda idx, threads: map_trials(one, idx, threads), summary)


def _density(p, seed):
    from ..percolation import Tessellation, density_config, density_fraction

    tess = Tessellation.for_intensity(p["cube_side"], p["cell_side"], p["xi"], p["lam"], p["d"])
    config = density_config(p["lam"], p["d"], tess, p["t"], seed=seed)
    config.check_buffer(horizon=p["t"] - 1)

    def one(tr):
        rep = density_fraction(config, tess, p["t"], trial=tr)
        return {"run": tr, "fraction": rep.fraction, "min_occupancy": int(rep.min_occupancy.min()), "threshold": tess.threshold}

    return Job(("run", "fraction", "min_occupancy", "threshold"), p["runs"], lambda idx, threads: map_trials(one, idx, threads))


def _calibrate(p, seed):
    from ..percolation import calibrate_lambda_c

    est_box = {}

    def chunk(idx, threads):
        est = calibrate_lambda_c(
            p["d"], p["r"], p["side"], p["trials"], seed=seed, lam_max=p["lam_max"] or None, threads=threads
        )
        est_box["est"] = est
        return [{"trial": i, "lambda_c": float(s)} for i, s in enumerate(est.samples)]

    def summary(rows):
        est = est_box.get("est")
        return {} if est is None else {"median": est.median, "ci_lo": est.lo, "ci_hi": est.hi}

    return Job(("trial", "lambda_c"), 1, chunk, summary)


_JOBS = {
    "detect": _detect,
    "cover": _cover,
    "perc": _perc,
    "broadcast": _broadcast,
    "sausage": _sausage,
    "couple": _couple,
    "density": _density,
    "calibrate": _calibrate,
}


def prepare(spec: ExperimentSpec) -> Job:
    """Build the job; every precondition is checked here, before any simulation."""
    try:
        return _JOBS[spec.kind](spec.parameters, spec.seed)
    except SchemaError:
        raise
    except InvalidInput as exc:
        raise SchemaError(f"{spec.kind}: {exc}") from None


def meta_path(out) -> Path:
    return Path(str(out) + ".meta.json")


def run_experiment(spec: ExperimentSpec, *, threads: int | None = None, write: bool = True) -> ResultTable:
    """Run ``spec`` and (unless ``write`` is False) write its CSV and metadata sidecar.

    Rows are produced in chunks of trials and written in trial order, so the
    CSV body is identical for any thread count.  If the run fails midway the
    rows written so far stay on disk and the metadata says ``incomplete``.
    """
    job = prepare(spec)
    threads = default_threads() if threads is None else max(1, int(threads))
    start = time.perf_counter()
    table = ResultTable(job.columns, [], {})
    out = Path(spec.output_path)
    fh = writer = None
    if write:
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True, exist_ok=True)
        fh = open(out, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(job.columns)
    error = None
    try:
        for a in range(0, job.units, CHUNK):
            rows = job.chunk(range(a, min(a + CHUNK, job.units)), threads)
            table.rows.extend(rows)
            if writer is not None:
                writer.writerows([[format_cell(r[c]) for c in job.columns] for r in rows])
                fh.flush()
    except Exception as exc:
        error = exc
    finally:
        if fh is not None:
            fh.close()
    meta = {
        "spec": spec.echo(),
        "version": __version__,
        "seed": spec.seed,
        "threads": threads,
        "wall_time_s": time.perf_counter() - start,
        "rows": len(table.rows),
        "incomplete": error is not None,
    }
    if error is not None:
        meta["error"] = f"{type(error).__name__}: {error}"
    elif job.summary is not None:
        meta["summary"] = job.summary(table.rows)
    table.metadata = meta
    if write:
        meta_path(out).write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if error is not None:
        raise error
    return table


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def read_table(path) -> ResultTable:
    """Load a CSV written by ``run_experiment`` (cells stay strings) and its sidecar, if present."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [dict(zip(header, rec)) for rec in rd]
    mp = meta_path(path)
    meta = json.loads(mp.read_text(encoding="utf-8")) if mp.exists() else {}
    return ResultTable(header, rows, meta)


# ---------------------------------------------------------------- pooling


def _num(v):
    """Float value of a cell, None when empty, raises ValueError when not numeric."""
    if v is None or v == "":
        return None
    if isinstance(v, (bool, np.bool_)):
        return float(v)
    if isinstance(v, str):
        low = v.strip().lower()
        if low in ("true", "false"):
            return float(low == "true")
        return float(low)
    return float(v)


def _numeric_columns(rows, schema):
    out = {}
    for c in schema:
        try:
            out[c] = [_num(r[c]) for r in rows]
        except (TypeError, ValueError):
            continue
    return out


def aggregate(tables) -> ResultTable:
    """Pool tables of one schema into per-column summaries (column, n, mean, std_error).

    Each row counts as one trial unless the schema has a ``paths`` column, whose
    values then weight the rows.  A column ``X_mean`` with a companion
    ``X_se`` pools its standard errors as sqrt(sum w^2 se^2) / sum w; other
    columns use the pooled sample standard error.  Empty cells (censored
    values) are skipped.  Sums are exact (fsum), so the result does not depend
    on the order of the inputs.
    """
    tables = list(tables)
    if not tables:
        raise InvalidInput("nothing to aggregate")
    ref = tables[0].schema
    for t in tables[1:]:
        if t.schema != ref:
            a, b = list(ref), list(t.schema)
            diff = sorted(set(a) ^ set(b))
            if not diff:
                diff = [x for x, y in zip(a, b) if x != y]
                raise SchemaError("schema mismatch: column order differs at " + ", ".join(diff))
            raise SchemaError("schema mismatch in columns: " + ", ".join(diff))
    rows = [r for t in tables for r in t.rows]
    cols = _numeric_columns(rows, ref)
    weights = [1.0] * len(rows)
    if "paths" in cols and all(w is not None for w in cols["paths"]):
        weights = cols["paths"]
    out = []
    for c in ref:
        if c not in cols or c in ("trial", "run"):
            continue
        pairs = [(w, x) for w, x in zip(weights, cols[c]) if x is not None and not math.isnan(x)]
        n = len(pairs)
        if n == 0:
            out.append({"column": c, "n": 0, "mean": None, "std_error": None})
            continue
        W = math.fsum(w for w, _ in pairs)
        mean = math.fsum(w * x for w, x in pairs) / W
        se_col = c[: -len("_mean")] + "_se" if c.endswith("_mean") else None
        if se_col in cols:
            ses = [s for s, x in zip(cols[se_col], cols[c]) if x is not None and not math.isnan(x)]
            se = math.sqrt(math.fsum((w * s) ** 2 for (w, _), s in zip(pairs, ses))) / W
        elif n > 1:
            # weighted variance with frequency weights
            var = math.fsum(w * (x - mean) ** 2 for w, x in pairs) / (W - W / n)
            se = math.sqrt(var / n)
        else:
            se = None
        out.append({"column": c, "n": n, "mean": mean, "std_error": se})
    sources = sorted(json.dumps(_jsonable(t.metadata.get("spec", {})), sort_keys=True) for t in tables)
    return ResultTable(("column", "n", "mean", "std_error"), out, {"sources": sources, "tables": len(tables)})


def pooled_survival(tables, time_col: str, horizon: float, dt: float) -> TailCurve:
    """Survival curve of a per-trial event time column (empty = censored), pooled over tables."""
    vals = []
    for t in tables:
        vals += [_num(v) for v in t.column(time_col)]
    steps = np.array([-1 if v is None else int(round(v / dt)) for v in vals], dtype=np.int64)
    return tail_from_steps(steps, int(round(horizon / dt)), dt)
