"""Loss-function comparison: fit every spectrum with every loss and tabulate.

Raw results are JSON lines, one record per (spectrum, loss). Reports are a
``report.json`` plus CSV tables meant for downstream plotting.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .circuit import parse_circuit
from .datagen import id_sort_key
from .loss import LOG_BASE, PHASE_UNIT, WEIGHTED_LOSSES, LossKind
from .metrics import CHI2, R2_MAG, R2_PHASE, R2_SCORE, TIME, ape, mape
from .solver import FitOptions, basinhop_fit, fit_multistart, task_rng

log = logging.getLogger(__name__)

SUMMARY_METRICS = (CHI2, R2_SCORE, R2_MAG, R2_PHASE, TIME)
LOWER_IS_BETTER = (CHI2, TIME)
STAT_FIELDS = ("mean", "q25", "q50", "q75", "lo_whisker", "hi_whisker", "outliers")
CSV_COLUMNS = {
    "convergence.csv": ("loss", "count", "rate"),
    "summary.csv": ("loss", "metric", "mean", "q25", "q50", "q75", "lo_whisker", "hi_whisker", "outliers"),
    "mape.csv": ("circuit", "loss", "component", "mape"),
    "radar.csv": ("loss", "metric", "value"),
    "retention.csv": ("circuit", "loss", "retained", "total", "rate"),
}


@dataclass(frozen=True)
class BasinHopSettings:
    hop_count: int = 50
    step_scale: float = 0.5
    temperature: float = 1.0


def _finite_or_none(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _fit_task(task):
    """Run one (spectrum, loss) fit. Module-level so process pools can pickle it."""
    ls_id, circuit, spectrum, kind, options, method, bh = task
    model = parse_circuit(circuit)
    rng = task_rng(options.rng_seed, ls_id, None if options.paired else kind)
    record = {"spectrum_id": ls_id, "circuit": circuit, "loss": kind.token}
    try:
        if method == "basinhop":
            out = basinhop_fit(model, spectrum, kind, options, bh.hop_count, bh.step_scale, bh.temperature, rng=rng)
        else:
            out = fit_multistart(model, spectrum, kind, options, rng=rng)
    except Exception as exc:  # recorded, never aborts the run
        record.update(
            converged=False, restarts_used=0, chi2=None, r2_score=None, r2_mag=None, r2_phase=None,
            final_loss=None, time_s=None, evaluations=0, best_params=None, error=f"{type(exc).__name__}: {exc}",
        )
        return record
    record.update(
        converged=out.converged,
        restarts_used=out.restarts_used,
        chi2=_finite_or_none(out.chi2),
        r2_score=_finite_or_none(out.r2_score),
        r2_mag=_finite_or_none(out.r2_magnitude),
        r2_phase=_finite_or_none(out.r2_phase),
        final_loss=_finite_or_none(out.final_loss),
        time_s=out.wall_time,
        evaluations=out.evaluations,
        best_params={n: float(v) for n, v in zip(model.param_names, out.best_params)},
        error=None,
    )
    return record


def _record_key(rec):
    return (id_sort_key(rec["spectrum_id"]), [k.token for k in LossKind].index(rec["loss"]))


def read_raw(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                # a torn final line from an interrupted run; that pair is redone
                log.warning("skipping unreadable raw record in %s", path)
    return out


def _dump(rec) -> str:
    return json.dumps(rec, sort_keys=True)


def run_benchmark(
    dataset,
    loss_kinds: Sequence,
    options: FitOptions | None = None,
    raw_path=None,
    jobs: int = 1,
    method: str = "multistart",
    basinhop: BasinHopSettings | None = None,
) -> list:
    """One record per (spectrum, loss).

    With ``raw_path`` set, records are appended as they complete and pairs
    already present in the file are skipped; the file is rewritten in
    canonical order at the end.
    """
    if not dataset or not loss_kinds:
        raise ValueError("dataset and loss list must be nonempty")
    if method not in ("multistart", "basinhop"):
        raise ValueError(f"unknown method {method!r}")
    options = options or FitOptions()
    kinds = [LossKind.from_token(k) for k in loss_kinds]
    bh = basinhop or BasinHopSettings()

    done = {}
    if raw_path is not None:
        for rec in read_raw(raw_path):
            done[(rec["spectrum_id"], rec["loss"])] = rec
    tasks = [
        (ls.id, ls.circuit, ls.spectrum, kind, options, method, bh)
        for ls in dataset
        for kind in kinds
        if (ls.id, kind.token) not in done
    ]
    log.info("%d fits to run (%d already done)", len(tasks), len(done))

    fh = None
    if raw_path is not None:
        Path(raw_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(raw_path, "a", encoding="utf-8")
    try:
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = pool.map(_fit_task, tasks, chunksize=4)
                for rec in results:
                    _store(rec, done, fh)
        else:
            for task in tasks:
                _store(_fit_task(task), done, fh)
    finally:
        if fh is not None:
            fh.close()

    wanted = {(ls.id, k.token) for ls in dataset for k in kinds}
    records = sorted((r for key, r in done.items() if key in wanted), key=_record_key)
    if raw_path is not None:
        everything = sorted(done.values(), key=_record_key)
        tmp = Path(str(raw_path) + ".tmp")
        tmp.write_text("".join(_dump(r) + "\n" for r in everything), encoding="utf-8")
        os.replace(tmp, raw_path)
    return records


def _store(rec, done, fh):
    done[(rec["spectrum_id"], rec["loss"])] = rec
    if fh is not None:
        fh.write(_dump(rec) + "\n")
        fh.flush()


# --- aggregation -------------------------------------------------------------


def _losses_in(records) -> list:
    present = {r["loss"] for r in records}
    return [k.token for k in LossKind if k.token in present]


def _tokens(losses) -> list:
    return [LossKind.from_token(k).token for k in losses]


def convergence_counts(records, losses=None) -> dict:
    """``{loss: (converged count, attempted, rate)}``."""
    losses = _tokens(losses) if losses is not None else _losses_in(records)
    out = {}
    for loss in losses:
        rs = [r for r in records if r["loss"] == loss]
        n = sum(1 for r in rs if r["converged"])
        out[loss] = (n, len(rs), n / len(rs) if rs else 0.0)
    return out


def mutual_converged(records, losses=WEIGHTED_LOSSES) -> set:
    """Ids that converged under every loss in ``losses``."""
    losses = _tokens(losses)
    if not losses:
        raise ValueError("loss subset is empty")
    sets = []
    for loss in losses:
        sets.append({r["spectrum_id"] for r in records if r["loss"] == loss and r["converged"]})
    return set.intersection(*sets)


def truth_from_manifest(manifest: dict) -> dict:
    return {e["id"]: (e["circuit"], dict(e["true_params"])) for e in manifest["spectra"]}


def _max_ape(rec, truth) -> float:
    if rec.get("best_params") is None:
        return math.inf
    circuit, true_params = truth[rec["spectrum_id"]]
    schema = parse_circuit(circuit).schema
    fitted = [rec["best_params"][d.name] for d in schema]
    true = [true_params[d.name] for d in schema]
    return max(ape(fitted, true, schema).values())


def prescreen(records, truth: dict, threshold_pct: float = 100.0, ids: Iterable | None = None, losses=None):
    """Keep fits whose APE stays within ``threshold_pct`` for every component.

    Returns ``(retained, table)``: ``retained[loss]`` is a set of ids and
    ``table[loss][circuit] = (retained, total, rate)``. The population is
    ``ids`` (typically the mutual-converged set); all ids when omitted.
    """
    losses = _tokens(losses) if losses is not None else _losses_in(records)
    ids = set(ids) if ids is not None else {r["spectrum_id"] for r in records}
    retained = {}
    table = {}
    for loss in losses:
        keep = set()
        per_circuit = {}
        for r in records:
            if r["loss"] != loss or r["spectrum_id"] not in ids:
                continue
            circuit = truth[r["spectrum_id"]][0]
            tot, ok = per_circuit.get(circuit, (0, 0))
            passed = _max_ape(r, truth) <= threshold_pct
            if passed:
                keep.add(r["spectrum_id"])
            per_circuit[circuit] = (tot + 1, ok + passed)
        retained[loss] = keep
        table[loss] = {c: (ok, tot, ok / tot) for c, (tot, ok) in per_circuit.items()}
    return retained, table


def box_stats(values) -> dict:
    """Mean, linear-interpolated quartiles, Tukey whiskers and outlier count."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    iqr = q75 - q25
    lo_fence, hi_fence = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "mean": float(v.mean()),
        "min": float(v.min()),
        "q25": float(q25),
        "q50": float(q50),
        "q75": float(q75),
        "lo_whisker": float(inside.min()),
        "hi_whisker": float(inside.max()),
        "outliers": int(v.size - inside.size),
    }


def summarize(records, ids, losses=None) -> dict:
    """``summary[loss][metric]`` box statistics over the given ids."""
    ids = set(ids)
    if not ids:
        raise ValueError("empty id set")
    losses = _tokens(losses) if losses is not None else _losses_in(records)
    out = {}
    for loss in losses:
        rs = [r for r in records if r["loss"] == loss and r["spectrum_id"] in ids]
        stats = {}
        for metric in SUMMARY_METRICS:
            vals = [r[metric] for r in rs if r.get(metric) is not None]
            if vals:
                stats[metric] = box_stats(vals)
        out[loss] = stats
    return out


def radar_normalize(summary: dict) -> dict:
    """Min-max normalize per-loss means of each metric into [0, 1].

    Chi-squared and time are inverted so that 1 is always best. A metric
    whose means are all equal maps to 0.5 for every loss.
    """
    losses = list(summary)
    if len(losses) < 2:
        raise ValueError("radar normalization needs at least two losses")
    out = {loss: {} for loss in losses}
    for metric in SUMMARY_METRICS:
        means = {}
        for loss in losses:
            entry = summary[loss].get(metric)
            if entry is not None:
                means[loss] = entry["mean"] if isinstance(entry, dict) else float(entry)
        if len(means) < 2:
            continue
        lo, hi = min(means.values()), max(means.values())
        for loss, m in means.items():
            if hi == lo:
                value = 0.5
            else:
                value = (m - lo) / (hi - lo)
                if metric in LOWER_IS_BETTER:
                    value = 1.0 - value
            out[loss][metric] = value
    return out


def mape_tables(records, truth: dict, retained: dict) -> dict:
    """``tables[circuit][loss]`` = per-component MAPE plus ``Average`` over retained fits."""
    out = {}
    for loss, ids in retained.items():
        by_circuit = {}
        for r in records:
            if r["loss"] != loss or r["spectrum_id"] not in ids:
                continue
            circuit, true_params = truth[r["spectrum_id"]]
            schema = parse_circuit(circuit).schema
            fitted = [r["best_params"][d.name] for d in schema]
            true = [true_params[d.name] for d in schema]
            by_circuit.setdefault(circuit, []).append(ape(fitted, true, schema))
        for circuit, tables in by_circuit.items():
            out.setdefault(circuit, {})[loss] = mape(tables)
    return out


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_report(
    records,
    manifest: dict,
    options: FitOptions,
    compare=WEIGHTED_LOSSES,
    threshold_pct: float = 100.0,
    method: str = "multistart",
    basinhop: BasinHopSettings | None = None,
) -> dict:
    """Aggregate raw records into the full comparison report."""
    truth = truth_from_manifest(manifest)
    run_losses = _losses_in(records)
    compare = [k for k in _tokens(compare) if k in run_losses]
    if not compare:
        compare = run_losses
    mutual = mutual_converged(records, compare)
    retained, retention = prescreen(records, truth, threshold_pct, ids=mutual, losses=compare)
    summary = summarize(records, mutual, compare) if mutual else {}
    radar = radar_normalize(summary) if len(summary) >= 2 else {}
    circuits = list(dict.fromkeys(c for c, _ in truth.values()))
    report = {
        "provenance": {
            "manifest_sha256": manifest_hash(manifest),
            "dataset_seed": manifest.get("seed"),
            "options": options.to_dict(),
            "method": method,
            "basinhop": vars(basinhop or BasinHopSettings()) if method == "basinhop" else None,
            "log_base": LOG_BASE,
            "phase_unit": PHASE_UNIT,
            "prescreen_threshold_pct": threshold_pct,
        },
        "machine": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "processor": platform.processor(),
        },
        "n_spectra": len({r["spectrum_id"] for r in records}),
        "losses": run_losses,
        "compared_losses": compare,
        "convergence": {k: {"count": c, "total": n, "rate": rate} for k, (c, n, rate) in convergence_counts(records).items()},
        "mutual_converged": sorted(mutual, key=id_sort_key),
        "retention": {
            loss: {c: {"retained": tbl[c][0], "total": tbl[c][1], "rate": tbl[c][2]} for c in circuits if c in tbl}
            for loss, tbl in retention.items()
        },
        "summary": summary,
        "mape": {c: mape_by[c] for c in circuits if c in (mape_by := mape_tables(records, truth, retained))},
        "radar": radar,
        "failures": [
            {"spectrum_id": r["spectrum_id"], "loss": r["loss"], "error": r["error"]} for r in records if r.get("error")
        ],
    }
    if TIME in (summary.get("x2") or {}) and TIME in (summary.get("log-b") or {}):
        report["time_ratio_x2_over_log_b"] = summary["x2"][TIME]["mean"] / summary["log-b"][TIME]["mean"]
    return report


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _drop_time(obj):
    if isinstance(obj, dict):
        return {k: _drop_time(v) for k, v in obj.items() if k not in (TIME, "machine", "time_ratio_x2_over_log_b")}
    if isinstance(obj, list):
        return [_drop_time(v) for v in obj]
    return obj


def report_rows(report: dict, canonical: bool = False) -> dict:
    """CSV rows per file name. ``canonical`` drops the timing rows."""
    rows = {name: [] for name in CSV_COLUMNS}
    for loss, c in report["convergence"].items():
        rows["convergence.csv"].append((loss, c["count"], c["rate"]))
    for loss, metrics in report["summary"].items():
        for metric, st in metrics.items():
            if canonical and metric == TIME:
                continue
            rows["summary.csv"].append((loss, metric, *(st[f] for f in STAT_FIELDS)))
    for circuit, per_loss in report["mape"].items():
        for loss, comps in per_loss.items():
            for comp, value in comps.items():
                rows["mape.csv"].append((circuit, loss, comp, value))
    for loss, metrics in report["radar"].items():
        for metric, value in metrics.items():
            if canonical and metric == TIME:
                continue
            rows["radar.csv"].append((loss, metric, value))
    for loss, per_circuit in report["retention"].items():
        for circuit, r in per_circuit.items():
            rows["retention.csv"].append((circuit, loss, r["retained"], r["total"], r["rate"]))
    return rows


def write_report(out_dir, report: dict, canonical: bool = False) -> Path:
    """Write ``report.json`` and the CSV tables into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in report_rows(report, canonical).items():
        with (out / name).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS[name])
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    body = _drop_time(report) if canonical else report
    (out / "report.json").write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    return out


def run_and_report(dataset, manifest, loss_kinds, options, out_dir, jobs=1, method="multistart",
                   basinhop=None, canonical=False, compare=WEIGHTED_LOSSES) -> dict:
    out = Path(out_dir)
    started = time.perf_counter()
    records = run_benchmark(dataset, loss_kinds, options, out / "raw.jsonl", jobs, method, basinhop)
    report = build_report(records, manifest, options, compare, method=method, basinhop=basinhop)
    if not canonical:
        report["elapsed_s"] = time.perf_counter() - started
    write_report(out, report, canonical)
    return report
