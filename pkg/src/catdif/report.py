"""Tables, plot-ready data and metadata for a :class:`StudyReport`.

Files written by :func:`emit_tables`:

``precision.csv``  cell, method, length, exposure, dif_parameter, dif_proportion,
                   bias_mu, bias_sigma, mse_mu, mse_sigma, correlation_mu,
                   correlation_sigma, csem_mu, csem_sigma, n_replications
``type1.csv``      cell, method, length, exposure, dif_parameter, dif_proportion,
                   model, mu, sigma, n, pooled, n_pairs
``power.csv``      same columns as type1.csv (header only for study 1)
``drops.csv``      cell, prop_mu, prop_sigma, count_mu, count_sigma, count_min,
                   count_max, total_mu, total_sigma, total_min, total_max
``fits.csv``       one row per (cell, replication, item, model); see FIT_COLUMNS
``meta.json``      config echo, seeds, package version, per-cell notes

Wall-clock timings go to ``timings.json`` only on request, so repeated
runs give byte-identical trees. Missing values are empty cells.
"""
from __future__ import annotations

import csv
import json
import math
import os
from importlib import metadata

from .harness import StudyReport, config_dict

COND_COLUMNS = ["cell", "method", "length", "exposure", "dif_parameter", "dif_proportion"]
RATE_COLUMNS = COND_COLUMNS + ["model", "mu", "sigma", "n", "pooled", "n_pairs"]
PRECISION_COLUMNS = COND_COLUMNS + ["bias_mu", "bias_sigma", "mse_mu", "mse_sigma", "correlation_mu",
                                    "correlation_sigma", "csem_mu", "csem_sigma", "n_replications"]
DROP_COLUMNS = ["cell", "prop_mu", "prop_sigma", "count_mu", "count_sigma", "count_min", "count_max",
                "total_mu", "total_sigma", "total_min", "total_max"]
FIT_COLUMNS = ["cell", "replication", "item_id", "model", "is_dif", "converged", "flagged", "p_g",
               "estimate_g", "se_g", "deviance", "aic", "bic", "tau0_sq", "tau1_sq", "tau10", "icc",
               "r2_marginal", "r2_conditional", "n", "boundary", "note"]


def _num(x, digits=3) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    s = f"{x:.{digits}f}"
    return "0." + "0" * digits if s == "-0." + "0" * digits else s


def _sig(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return "" if not math.isfinite(x) else f"{x:.6g}"
    return str(x)


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cond(c):
    cell = c.cell
    return [cell.id, cell.estimator, cell.test_length, _num(cell.exposure, 2),
            cell.dif.parameter if cell.dif else "", _num(cell.dif.proportion, 2) if cell.dif else ""]


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def emit_tables(report: StudyReport, out_dir, include_timings: bool = False) -> list[str]:
    """Write the study tables and metadata; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    p = lambda name: os.path.join(out_dir, name)  # noqa: E731
    prec, t1, pw, drops = [], [], [], []
    for c in report.conditions:
        pm, ps = c.precision_mean, c.precision_sd
        prec.append(_cond(c) + [_num(v) for k in ("bias", "mse", "correlation", "csem")
                                for v in (pm[k], ps[k])] + [c.n_replications])
        for rows, rates in ((t1, c.type1), (pw, c.power)):
            for m, r in rates.items():
                rows.append(_cond(c) + [m, _num(r.mean), _num(r.sd), r.n_items, _num(r.pooled), r.n_pairs])
        drops.append([c.cell_id] + [_num(c.drops.get(k, math.nan)) for k in DROP_COLUMNS[1:]])
    _write(p("precision.csv"), PRECISION_COLUMNS, prec)
    _write(p("type1.csv"), RATE_COLUMNS, t1)
    _write(p("power.csv"), RATE_COLUMNS, pw)
    _write(p("drops.csv"), DROP_COLUMNS, drops)
    fits = []
    for r in report.replications:
        for f in r.fits:
            fits.append([r.cell_id, r.replication] + [_sig(getattr(f, k)) for k in FIT_COLUMNS[2:]])
    _write(p("fits.csv"), FIT_COLUMNS, fits)
    meta = {
        "package_version": _version(),
        "config": config_dict(report.config),
        "seeds": report.seeds,
        "cells": [{"cell": c.cell_id, "n_replications": c.n_replications,
                   "n_failed": c.n_failed, "notes": c.notes} for c in report.conditions],
        "failed_replications": [{"cell": r.cell_id, "replication": r.replication, "error": r.error}
                                for r in report.replications if not r.ok],
        "icc_cell": report.icc_cell,
    }
    with open(p("meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written = [p(n) for n in ("precision.csv", "type1.csv", "power.csv", "drops.csv", "fits.csv", "meta.json")]
    if include_timings:
        with open(p("timings.json"), "w") as fh:
            json.dump(report.timings, fh, indent=2, sort_keys=True)
        written.append(p("timings.json"))
    return written


def emit_plot_data(report: StudyReport, out_dir) -> list[str]:
    """Long-format CSVs for the Type-I comparison, ICC histogram and interval bar plot.

    ICC values and interval counts come from the first replication of the
    first cell (``report.icc_cell``).
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = [[c.cell_id, m, _num(r.mean)] for c in report.conditions for m, r in c.type1.items()]
    _write(os.path.join(out_dir, "type1_by_model.csv"), ["cell", "model", "rate"], rows)
    src = next((r for r in report.replications
                if r.cell_id == report.icc_cell and r.replication == 0), None)
    icc = src.icc if src else {}
    counts = src.interval_counts if src else {}
    _write(os.path.join(out_dir, "icc_histogram.csv"), ["item", "rho"],
           [[k, _sig(float(icc[k]))] for k in sorted(icc)])
    _write(os.path.join(out_dir, "interval_barplot.csv"), ["item", "interval_j", "count"],
           [[k, j, n] for k in sorted(counts) for j, n in sorted(counts[k].items())])
    return [os.path.join(out_dir, n) for n in ("type1_by_model.csv", "icc_histogram.csv", "interval_barplot.csv")]


def read_table(path) -> list[dict]:
    """Read any emitted CSV; numeric-looking fields become floats, empty fields None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: _parse(v) for k, v in row.items()})
    return out


def _parse(v: str):
    if v == "":
        return None
    try:
        return float(v)
    except ValueError:
        return v


def read_meta(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
