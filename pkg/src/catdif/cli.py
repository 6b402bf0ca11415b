"""``catdif`` command line.

Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 simulation or fitting failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, parse_config
from .engine import CatConfig, NoEligibleItem, PoolArrays, simulate_cohort, read_logs_csv, write_logs_csv
from .glm import RankDeficient
from .glmm import NonConvergence, icc_screen
from .harness import (EmptyCell, MODEL_NAMES, default_workers, design_cells, fit_model, run_study,
                      stable_seed, study_pool)
from .irt import IrtConfig
from .pool import generate_cohort, inject_dif, no_dif, write_pool_csv
from .prep import IntervalGrid, build_frames, read_frames_csv, write_frames_csv
from .report import FIT_COLUMNS, _sig, _write, emit_plot_data, emit_tables

EXIT_CONFIG, EXIT_IO, EXIT_FAIL = 2, 3, 4


def _load(args):
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, base_seed=args.seed)
    return cfg


def cmd_study(args) -> int:
    cfg = _load(args)
    workers = args.workers if args.workers is not None else default_workers()
    done = [0]
    total = len(design_cells(cfg)) * cfg.n_replications

    def progress(res):
        done[0] += 1
        logging.info("%d/%d %s rep %d (%.1fs)%s", done[0], total, res.cell_id, res.replication,
                     res.seconds, f" {res.error}" if res.error else "")

    report = run_study(cfg, workers=workers, progress=progress)
    emit_tables(report, args.out, include_timings=args.timings)
    emit_plot_data(report, args.out)
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    cells = design_cells(cfg)
    if not 0 <= args.cell < len(cells):
        raise ConfigError(f"--cell must lie in [0, {len(cells) - 1}]")
    cell = cells[args.cell]
    pool = study_pool(cfg)
    seed = stable_seed(cfg.base_seed, cell.id, args.replication)
    s_cohort, s_dif, s_cat = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    focal = no_dif(pool) if cell.dif is None else inject_dif(pool, cell.dif, seed=int(s_dif))
    cat = CatConfig(test_length=cell.test_length, max_exposure=cell.exposure,
                    provisional_estimator=cell.estimator, irt=IrtConfig(D=cfg.D))
    logs, prec = simulate_cohort(generate_cohort(cfg.n_examinees, seed=int(s_cohort)),
                                 PoolArrays(pool, focal), None, cat, seed=int(s_cat))
    os.makedirs(args.out, exist_ok=True)
    write_pool_csv(os.path.join(args.out, "pool.csv"), pool, focal)
    write_logs_csv(os.path.join(args.out, "logs.csv"), logs)
    with open(os.path.join(args.out, "precision.json"), "w") as fh:
        json.dump({"cell": cell.id, "replication": args.replication, "seed": seed,
                   **dataclasses.asdict(prec)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_clean(args) -> int:
    logs = read_logs_csv(args.logs)
    poly = [s for s in args.polytomous.split(",") if s] if args.polytomous else []
    frames, rep = build_frames(logs, IntervalGrid(), q=args.q, polytomous=poly)
    os.makedirs(args.out, exist_ok=True)
    write_frames_csv(os.path.join(args.out, "frames.csv"), frames)
    with open(os.path.join(args.out, "drops.json"), "w") as fh:
        json.dump({**dataclasses.asdict(rep), "n_dropped": rep.n_dropped,
                   "dropped_fraction": rep.dropped_fraction}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_fit(args) -> int:
    models = [m for m in args.models.split(",") if m]
    bad = [m for m in models if m not in MODEL_NAMES]
    if bad or not models:
        raise ConfigError(f"unknown models: {bad}")
    if not 0 <= args.alpha <= 1:
        raise ConfigError("alpha must lie in [0, 1]")
    frames = read_frames_csv(args.frames)
    rows = []
    for iid, fr in frames.items():
        for m in models:
            f = fit_model(fr, m, args.alpha)
            rows.append(["", ""] + [_sig(getattr(f, k)) for k in FIT_COLUMNS[2:]])
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "fits.csv"), FIT_COLUMNS, rows)
    return 0


def cmd_screen_icc(args) -> int:
    frames = read_frames_csv(args.frames)
    res = icc_screen(frames)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "icc_histogram.csv"), ["item", "rho"],
           [[k, _sig(float(v))] for k, v in sorted(res.rho.items())])
    with open(os.path.join(args.out, "icc_summary.json"), "w") as fh:
        json.dump({**res.summary, "failed": res.failed}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="catdif", description="Multilevel DIF detection in simulated CAT data.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("study", help="run a full seeded study and write tables")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--timings", action="store_true", help="also write timings.json")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("simulate", help="simulate one replication of one cell")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--cell", type=int, default=0)
    s.add_argument("--replication", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("clean", help="turn administration logs into per-item frames")
    s.add_argument("--logs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--q", type=int, default=2, choices=(1, 2))
    s.add_argument("--polytomous", default="")
    s.set_defaults(func=cmd_clean)

    s = sub.add_parser("fit", help="fit DIF models to every frame")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--models", default="M6,S1,S2,S3")
    s.add_argument("--alpha", type=float, default=0.05)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("screen-icc", help="empty-model ICC for every frame")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_screen_icc)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"catdif: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"catdif: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (NoEligibleItem, NonConvergence, RankDeficient, EmptyCell, ValueError) as err:
        print(f"catdif: failure: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
