"""Seeded Monte Carlo study: design cells, replications, fitting, aggregation."""
from __future__ import annotations

import hashlib
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import CatConfig, NoEligibleItem, PoolArrays, PrecisionSummary, simulate_cohort
from .glm import GLM_SPECS, RankDeficient, DegenerateStrata, fit_glm, wald_test
from .glmm import GLMM_SPECS, NonConvergence, fit_glmm, icc_screen
from .irt import IrtConfig, Item
from .pool import DifConfig, PoolConfig, generate_cohort, generate_pool, inject_dif, no_dif
from .prep import DropReport, IntervalGrid, build_frames, drop_summary

log = logging.getLogger(__name__)

MODEL_NAMES = tuple(GLM_SPECS) + tuple(GLMM_SPECS)


class EmptyCell(RuntimeError):
    """No item survived convergence and replication-count filtering."""


@dataclass(frozen=True)
class StudyConfig:
    study: int = 1
    n_replications: int = 100
    n_examinees: int = 5000
    estimators: tuple = ("MLE", "EAP")
    test_lengths: tuple = (25, 35)
    exposure_rates: tuple = (0.20, 0.33)
    dif_parameters: tuple = ("a", "b")
    dif_proportions: tuple = (0.2, 0.4)
    dif_magnitude: float = 0.4
    redraw_dif: bool = True
    alpha: float = 0.05
    models: tuple = ("M6", "S1", "S2", "S3")
    base_seed: int = 0
    min_item_replications: int = 10
    pool_size: int = 800
    D: float = 1.0
    icc_screen: bool = True

    def __post_init__(self):
        for name in ("estimators", "test_lengths", "exposure_rates", "dif_parameters",
                     "dif_proportions", "models"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.study not in (1, 2):
            raise ValueError("study must be 1 or 2")
        if self.n_replications < 1 or self.n_examinees < 2:
            raise ValueError("need at least one replication and two examinees")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.models:
            raise ValueError("at least one model is required")
        bad = [m for m in self.models if m not in MODEL_NAMES]
        if bad:
            raise ValueError(f"unknown models {bad}")
        if any(e not in ("MLE", "EAP") for e in self.estimators):
            raise ValueError("estimators must be MLE or EAP")
        if any(not 0 < r <= 1 for r in self.exposure_rates):
            raise ValueError("exposure rates must lie in (0, 1]")
        if any(int(k) != k or k < 1 for k in self.test_lengths):
            raise ValueError("test lengths must be positive integers")
        if any(k > self.pool_size for k in self.test_lengths):
            raise ValueError("test length exceeds pool size")
        if any(p not in ("a", "b") for p in self.dif_parameters):
            raise ValueError("DIF parameter must be a or b")
        if any(not 0 <= p <= 1 for p in self.dif_proportions) or self.dif_magnitude < 0:
            raise ValueError("invalid DIF proportion or magnitude")
        if self.min_item_replications < 1:
            raise ValueError("min_item_replications must be at least 1")
        if not self.estimators or not self.test_lengths or not self.exposure_rates:
            raise ValueError("every design factor needs at least one level")
        if self.study == 2 and (not self.dif_parameters or not self.dif_proportions):
            raise ValueError("study 2 needs DIF parameters and proportions")

    @property
    def q(self) -> int:
        """Random effects per interval used by cleaning (largest among models)."""
        qs = [GLMM_SPECS[m].q for m in self.models if m in GLMM_SPECS]
        return max(qs) if qs else 2


@dataclass(frozen=True)
class Cell:
    estimator: str
    test_length: int
    exposure: float
    dif: DifConfig | None = None

    @property
    def id(self) -> str:
        base = f"{self.estimator}-K{self.test_length}-r{self.exposure:.2f}"
        if self.dif is None:
            return base
        return f"{base}-{self.dif.parameter}{self.dif.proportion:.2f}"


def design_cells(cfg: StudyConfig) -> list[Cell]:
    """Cartesian product of the design factors, in a fixed order."""
    base = itertools.product(cfg.estimators, cfg.test_lengths, cfg.exposure_rates)
    if cfg.study == 1:
        return [Cell(e, int(k), float(r)) for e, k, r in base]
    difs = [DifConfig(parameter=p, magnitude=cfg.dif_magnitude, proportion=float(pr),
                      redraw_per_replication=cfg.redraw_dif)
            for p, pr in itertools.product(cfg.dif_parameters, cfg.dif_proportions)]
    return [Cell(e, int(k), float(r), d) for (e, k, r), d in itertools.product(list(base), difs)]


def stable_seed(*parts) -> int:
    """64-bit seed from a stable hash of the parts' text forms."""
    text = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def study_pool(cfg: StudyConfig) -> list[Item]:
    return generate_pool(PoolConfig(n_items=cfg.pool_size), seed=stable_seed(cfg.base_seed, "pool"))


@dataclass
class FitRecord:
    item_id: str
    model: str
    is_dif: bool
    converged: bool
    flagged: bool
    p_g: float
    estimate_g: float
    se_g: float
    deviance: float
    aic: float
    bic: float
    tau0_sq: float = math.nan
    tau1_sq: float = math.nan
    tau10: float = math.nan
    icc: float = math.nan
    r2_marginal: float = math.nan
    r2_conditional: float = math.nan
    n: int = 0
    boundary: bool = False
    note: str = ""


def fit_model(frame, model: str, alpha: float, is_dif: bool = False) -> FitRecord:
    """Fit one model to one frame and classify it with the Wald test on g."""
    nan = math.nan
    try:
        if model in GLMM_SPECS:
            fit = fit_glmm(frame, GLMM_SPECS[model])
            extra = dict(tau0_sq=fit.tau0_sq, tau1_sq=fit.tau1_sq, tau10=fit.tau10, icc=fit.icc,
                         r2_marginal=fit.r2_marginal, r2_conditional=fit.r2_conditional,
                         boundary=fit.boundary)
        else:
            fit = fit_glm(frame, GLM_SPECS[model])
            extra = {}
    except (RankDeficient, DegenerateStrata, NonConvergence, np.linalg.LinAlgError) as err:
        return FitRecord(frame.item_id, model, is_dif, False, False, nan, nan, nan, nan, nan, nan,
                         n=len(frame), note=type(err).__name__)
    has_g = "g" in fit.names
    z, p = wald_test(fit, "g") if has_g else (nan, nan)
    converged = bool(fit.converged) and (not has_g or math.isfinite(p))
    return FitRecord(
        frame.item_id, model, is_dif, converged, bool(converged and has_g and p < alpha),
        p, fit.estimate("g") if has_g else nan, fit.std_error("g") if has_g else nan,
        fit.deviance, fit.aic, fit.bic, n=len(frame), **extra,
    )


@dataclass
class ReplicationResult:
    cell_id: str
    replication: int
    seed: int
    precision: PrecisionSummary | None = None
    drops: DropReport | None = None
    fits: list = field(default_factory=list)
    dif_items: frozenset = frozenset()
    icc: dict = field(default_factory=dict)
    interval_counts: dict = field(default_factory=dict)
    error: str = ""
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.error


def run_replication(cfg: StudyConfig, cell: Cell, replication: int, pool: Sequence[Item] | None = None,
                    screen: bool = False) -> ReplicationResult:
    """Simulate, clean and fit one replication of one design cell.

    Everything random derives from ``stable_seed(base_seed, cell.id,
    replication)``, so a (cell, replication) pair is reproducible on its own.
    """
    t0 = time.perf_counter()
    seed = stable_seed(cfg.base_seed, cell.id, replication)
    out = ReplicationResult(cell.id, replication, seed)
    pool = study_pool(cfg) if pool is None else list(pool)
    s_cohort, s_dif, s_cat = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    if cell.dif is None:
        focal = no_dif(pool)
    else:
        dif_seed = int(s_dif) if cell.dif.redraw_per_replication else stable_seed(cfg.base_seed, cell.id, "dif")
        focal = inject_dif(pool, cell.dif, seed=dif_seed)
    out.dif_items = frozenset(focal.contaminated)
    cat = CatConfig(test_length=cell.test_length, max_exposure=cell.exposure,
                    provisional_estimator=cell.estimator, irt=IrtConfig(D=cfg.D))
    cohort = generate_cohort(cfg.n_examinees, seed=int(s_cohort))
    try:
        logs, out.precision = simulate_cohort(cohort, PoolArrays(pool, focal), None, cat, seed=int(s_cat))
    except NoEligibleItem as err:
        out.error = f"NoEligibleItem: {err}"
        log.warning("cell %s replication %d aborted: %s", cell.id, replication, err)
        out.seconds = time.perf_counter() - t0
        return out
    frames, out.drops = build_frames(logs, IntervalGrid(), q=cfg.q)
    for iid, frame in frames.items():
        is_dif = iid in out.dif_items
        for model in cfg.models:
            out.fits.append(fit_model(frame, model, cfg.alpha, is_dif))
    if screen:
        out.icc = icc_screen(frames).rho
        out.interval_counts = {iid: f.cluster_sizes for iid, f in frames.items()}
    out.seconds = time.perf_counter() - t0
    return out


@dataclass
class RateSummary:
    mean: float
    sd: float  # nan when fewer than two items
    n_items: int
    pooled: float  # flags / kept over every kept (item, replication) pair
    n_pairs: int


@dataclass
class ConditionResult:
    cell: Cell
    type1: dict
    power: dict
    precision_mean: dict
    precision_sd: dict
    drops: dict
    kept: dict  # (item_id, is_dif) -> kept replication count
    n_replications: int
    n_failed: int
    notes: list = field(default_factory=list)

    @property
    def cell_id(self) -> str:
        return self.cell.id


def _summarise(rates: list, flags_total: int, kept_total: int) -> RateSummary:
    v = np.array(rates, dtype=float)
    return RateSummary(
        mean=float(v.mean()) if len(v) else math.nan,
        sd=float(v.std(ddof=1)) if len(v) > 1 else math.nan,
        n_items=len(v),
        pooled=flags_total / kept_total if kept_total else math.nan,
        n_pairs=kept_total,
    )


def aggregate(cfg: StudyConfig, cell: Cell, results: Sequence[ReplicationResult],
              allow_empty: bool = False) -> ConditionResult:
    """Fold replication results of one cell into Type-I, power and precision.

    An (item, replication) pair is kept only if every configured model
    converged for that item. Rates are computed per item within DIF status
    (an item may be contaminated in some replications and clean in others);
    items with fewer kept replications than ``min_item_replications`` are
    left out of the per-item mean and SD but still enter the pooled rate.
    """
    results = sorted(results, key=lambda r: r.replication)
    good = [r for r in results if r.ok]
    if not good:
        raise ValueError(f"cell {cell.id}: no successful replication")
    models = list(cfg.models)
    kept: dict = {}
    flags: dict = {}
    for r in good:
        by_item: dict = {}
        for f in r.fits:
            by_item.setdefault(f.item_id, {})[f.model] = f
        for iid, fm in by_item.items():
            if not all(m in fm and fm[m].converged for m in models):
                continue
            key = (iid, iid in r.dif_items)
            kept[key] = kept.get(key, 0) + 1
            for m in models:
                flags[key + (m,)] = flags.get(key + (m,), 0) + int(fm[m].flagged)

    def rates(status: bool) -> dict:
        keys = sorted(k for k in kept if k[1] == status)
        out = {}
        for m in models:
            per_item = [flags[k + (m,)] / kept[k] for k in keys if kept[k] >= cfg.min_item_replications]
            out[m] = _summarise(per_item, sum(flags[k + (m,)] for k in keys), sum(kept[k] for k in keys))
        return out

    type1 = rates(False)
    power = rates(True) if cell.dif is not None else {}
    notes = []
    n_surv = next(iter(type1.values())).n_items + (next(iter(power.values())).n_items if power else 0)
    if n_surv == 0:
        if not allow_empty:
            raise EmptyCell(cell.id)
        notes.append("EmptyCell")
    prec = np.array([[r.precision.bias, r.precision.mse, r.precision.correlation, r.precision.csem] for r in good])
    names = ("bias", "mse", "correlation", "csem")
    return ConditionResult(
        cell=cell, type1=type1, power=power,
        precision_mean=dict(zip(names, prec.mean(axis=0).tolist())),
        precision_sd=dict(zip(names, prec.std(axis=0, ddof=1).tolist() if len(good) > 1 else [math.nan] * 4)),
        drops=drop_summary([r.drops for r in good]),
        kept=kept, n_replications=len(good), n_failed=len(results) - len(good), notes=notes,
    )


@dataclass
class StudyReport:
    config: StudyConfig
    conditions: list
    replications: list
    seeds: dict
    icc_cell: str = ""
    timings: dict = field(default_factory=dict)

    def condition(self, cell_id: str) -> ConditionResult:
        return next(c for c in self.conditions if c.cell_id == cell_id)


def _run_task(args):
    cfg, cell, rep, pool, screen = args
    return run_replication(cfg, cell, rep, pool, screen)


def default_workers() -> int:
    env = os.environ.get("CATDIF_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def run_study(cfg: StudyConfig, workers: int | None = None, keep_replications: bool = True,
              progress: Callable[[ReplicationResult], None] | None = None) -> StudyReport:
    """Run every replication of every cell and aggregate per cell.

    Replications run on a process pool of ``workers`` (default from
    ``CATDIF_WORKERS``, else 1). Aggregation happens after all results are
    collected and is ordered by replication index, so the report does not
    depend on scheduling.
    """
    t0 = time.perf_counter()
    workers = default_workers() if workers is None else max(1, int(workers))
    cells = design_cells(cfg)
    pool = study_pool(cfg)
    tasks = [(cfg, cell, rep, pool, cfg.icc_screen and rep == 0 and i == 0)
             for i, cell in enumerate(cells) for rep in range(cfg.n_replications)]
    results: list[ReplicationResult] = []
    if workers == 1:
        for t in tasks:
            res = _run_task(t)
            results.append(res)
            if progress:
                progress(res)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for res in ex.map(_run_task, tasks, chunksize=1):
                results.append(res)
                if progress:
                    progress(res)
    conditions = []
    for cell in cells:
        mine = [r for r in results if r.cell_id == cell.id]
        try:
            conditions.append(aggregate(cfg, cell, mine, allow_empty=True))
        except ValueError as err:
            log.error("cell %s: %s", cell.id, err)
            conditions.append(_failed_condition(cfg, cell, mine, str(err)))
    seeds = {"base_seed": cfg.base_seed, "pool": stable_seed(cfg.base_seed, "pool"),
             "replications": {f"{r.cell_id}/{r.replication}": r.seed for r in sorted(results, key=_order(cells))}}
    timings = {"total_seconds": time.perf_counter() - t0,
               "replication_seconds": {f"{r.cell_id}/{r.replication}": r.seconds for r in results}}
    return StudyReport(cfg, conditions, results if keep_replications else [], seeds,
                       icc_cell=cells[0].id if cfg.icc_screen else "", timings=timings)


def _order(cells):
    pos = {c.id: i for i, c in enumerate(cells)}
    return lambda r: (pos[r.cell_id], r.replication)


def _failed_condition(cfg, cell, results, msg) -> ConditionResult:
    nan4 = dict.fromkeys(("bias", "mse", "correlation", "csem"), math.nan)
    return ConditionResult(cell, {}, {}, nan4, dict(nan4), {}, {}, 0, len(results), notes=[msg])


def config_dict(cfg: StudyConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
