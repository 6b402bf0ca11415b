"""Item-adaptive CAT administration.

Item selection uses a weighted penalty model (content + information
penalties) followed by randomesque choice among the lowest-penalty
candidates; exposure control removes over-exposed items from the
candidate set beforehand. Responses are generated from focal-group
parameters where applicable, while selection and scoring only ever see
the reference (calibrated) parameters.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .irt import IrtConfig, Item, eap_from_logpost, info_array, prob_array
from .pool import Cohort, FocalMap, no_dif


class NoEligibleItem(RuntimeError):
    """Exposure control and the no-repeat rule left nothing to administer."""


@dataclass(frozen=True)
class CatConfig:
    test_length: int = 25
    max_exposure: float = 0.33
    provisional_estimator: str = "MLE"
    final_estimator: str = "MLE"
    theta_start: float = 0.0
    w_content: float = 1.0
    w_info: float = 1.0
    randomesque_k: int = 5
    blueprint: tuple = (0.30, 0.25, 0.25, 0.20)
    # False: clamp all-correct/all-incorrect provisional MLEs to the bounds.
    # True: use the EAP value for such prefixes instead.
    mle_eap_fallback: bool = False
    irt: IrtConfig = IrtConfig()

    def __post_init__(self):
        if self.test_length < 1:
            raise ValueError("test_length must be at least 1")
        if not 0.0 < self.max_exposure <= 1.0:
            raise ValueError("max_exposure must lie in (0, 1]")
        if self.provisional_estimator not in ("MLE", "EAP"):
            raise ValueError("provisional_estimator must be 'MLE' or 'EAP'")
        if self.final_estimator != "MLE":
            raise ValueError("final_estimator must be 'MLE'")
        if self.randomesque_k < 1:
            raise ValueError("randomesque_k must be at least 1")
        if self.w_content < 0 or self.w_info < 0:
            raise ValueError("WPM weights must be nonnegative")

    @property
    def warmup(self) -> int:
        """Examinees served before the exposure cap is enforced."""
        return math.ceil(1.0 / self.max_exposure - 1e-12)


class PoolArrays:
    """Column view of a pool (and its focal copy) used by the selection loop."""

    def __init__(self, pool: Sequence[Item], focal: FocalMap | None = None):
        focal = focal if focal is not None else no_dif(pool)
        self.ids = [it.id for it in pool]
        self.index = {iid: i for i, iid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("item ids must be unique within a pool")
        self.a = np.array([it.a for it in pool])
        self.b = np.array([it.b for it in pool])
        self.c = np.array([it.c for it in pool])
        self.category = np.array([it.category for it in pool], dtype=int)
        self.fa = np.array([focal[i].a for i in self.ids])
        self.fb = np.array([focal[i].b for i in self.ids])
        self.fc = np.array([focal[i].c for i in self.ids])
        self.contaminated = np.array([i in focal.contaminated for i in self.ids])

    def __len__(self):
        return len(self.ids)


@dataclass
class ExposureTally:
    """Pool-level administration counts shared across one cohort."""

    counts: np.ndarray
    n_examinees: int = 0

    @classmethod
    def empty(cls, n_items: int) -> "ExposureTally":
        return cls(np.zeros(n_items, dtype=np.int64), 0)

    def eligible_mask(self, cfg: CatConfig) -> np.ndarray:
        if self.n_examinees < cfg.warmup:
            return np.ones(len(self.counts), dtype=bool)
        return self.counts / self.n_examinees < cfg.max_exposure


@dataclass
class CatState:
    administered: list = field(default_factory=list)
    responses: list = field(default_factory=list)
    theta_provisional: float = 0.0
    category_counts: np.ndarray | None = None
    exposure: ExposureTally | None = None
    examinee_index: int = 0


@dataclass
class AdministrationLog:
    examinee_id: str
    group: int
    theta_true: float
    item_ids: list
    responses: np.ndarray
    theta_prev: np.ndarray
    theta_final: float
    se_final: float

    @property
    def slots(self):
        """(slot, item_id, theta_prev, response) tuples, slot counted from 1."""
        return [(k + 1, iid, float(t), int(x))
                for k, (iid, t, x) in enumerate(zip(self.item_ids, self.theta_prev, self.responses))]

    def __len__(self):
        return len(self.item_ids)


@dataclass(frozen=True)
class PrecisionSummary:
    bias: float
    mse: float
    correlation: float
    csem: float


def _rank_penalty(info: np.ndarray) -> np.ndarray:
    m = len(info)
    if m == 1:
        return np.zeros(1)
    order = np.argsort(-info, kind="stable")
    rank = np.empty(m)
    rank[order] = np.arange(m)
    return rank / (m - 1)


def _select(theta, avail, cat_counts, slot, P: PoolArrays, cfg: CatConfig, rng) -> int:
    idx = np.flatnonzero(avail)
    m = len(idx)
    if m == 0:
        raise NoEligibleItem("no eligible item left in the pool")
    if m == 1:
        return int(idx[0])
    info = info_array(theta, P.a[idx], P.b[idx], P.c[idx], cfg.irt.D)
    info_pen = _rank_penalty(info)
    cats = P.category[idx]
    blueprint = np.asarray(cfg.blueprint, dtype=float)
    projected = (cat_counts[cats] + 1.0) / (slot + 1.0) - blueprint[cats]
    content_pen = np.maximum(projected, 0.0)
    top = content_pen.max()
    if top > 0:
        content_pen = content_pen / top
    penalty = cfg.w_content * content_pen + cfg.w_info * info_pen
    order = np.lexsort((info_pen, penalty))
    k = min(cfg.randomesque_k, m)
    pick = order[int(rng.integers(k))] if k > 1 else order[0]
    return int(idx[pick])


def select_next_item(state: CatState, pool, cfg: CatConfig, n_examinees_so_far: int, rng) -> str:
    """Choose the next item id for ``state`` under WPM + randomesque.

    ``pool`` may be a list of items or a prebuilt :class:`PoolArrays`.
    Exposure filtering uses ``state.exposure`` (if any) against
    ``n_examinees_so_far``.
    """
    P = pool if isinstance(pool, PoolArrays) else PoolArrays(pool)
    avail = np.ones(len(P), dtype=bool)
    for iid in state.administered:
        avail[P.index[iid]] = False
    if state.exposure is not None and n_examinees_so_far >= cfg.warmup:
        avail &= state.exposure.counts / n_examinees_so_far < cfg.max_exposure
    n_cat = len(cfg.blueprint)
    cat_counts = state.category_counts
    if cat_counts is None:
        cat_counts = np.bincount([P.category[P.index[i]] for i in state.administered],
                                 minlength=n_cat).astype(float)
    i = _select(state.theta_provisional, avail, np.asarray(cat_counts, dtype=float),
                len(state.administered), P, cfg, rng)
    return P.ids[i]


def provisional_estimate(a, b, c, x, cfg: CatConfig, log_post=None) -> float:
    """Estimate used to pick the next item, from the responses so far."""
    irt = cfg.irt
    if cfg.provisional_estimator == "EAP":
        if log_post is None:
            log_post = _eap_logpost(a, b, c, x, irt)
        return eap_from_logpost(irt.grid, log_post).theta
    theta, _, ok = _kernels.mle(a, b, c, x, irt.D, irt.theta_min, irt.theta_max,
                                cfg.theta_start, 1e-6, 100, 30)
    if cfg.mle_eap_fallback and (x.sum() == 0 or x.sum() == len(x)):
        if log_post is None:
            log_post = _eap_logpost(a, b, c, x, irt)
        return eap_from_logpost(irt.grid, log_post).theta
    return float(theta)


def _item_logp(grid, a, b, c, x, D):
    p = prob_array(grid, a, b, c, D)
    return np.log(p) if x else np.log1p(-p)


def _eap_logpost(a, b, c, x, irt: IrtConfig):
    grid = irt.grid
    lp = -0.5 * grid ** 2
    for i in range(len(x)):
        lp = lp + _item_logp(grid, a[i], b[i], c[i], x[i], irt.D)
    return lp


def administer(examinee, pool, focal: FocalMap | None, cfg: CatConfig,
               exposure: ExposureTally, rng) -> AdministrationLog:
    """Run one fixed-length CAT for ``examinee = (id, theta_true, group)``.

    ``exposure`` is updated in place (counts and examinee total).
    """
    P = pool if isinstance(pool, PoolArrays) else PoolArrays(pool, focal)
    ex_id, theta_true, g = examinee
    K = cfg.test_length
    irt = cfg.irt
    grid = irt.grid
    avail = exposure.eligible_mask(cfg)
    cat_counts = np.zeros(len(cfg.blueprint))
    chosen = np.empty(K, dtype=np.int64)
    x = np.empty(K)
    theta_prev = np.empty(K)
    log_post = -0.5 * grid ** 2
    theta = float(cfg.theta_start)

    for k in range(K):
        theta_prev[k] = theta
        i = _select(theta, avail, cat_counts, k, P, cfg, rng)
        avail[i] = False
        chosen[k] = i
        cat_counts[P.category[i]] += 1
        if g == 1 and P.contaminated[i]:
            p = float(prob_array(theta_true, P.fa[i], P.fb[i], P.fc[i], irt.D))
        else:
            p = float(prob_array(theta_true, P.a[i], P.b[i], P.c[i], irt.D))
        x[k] = 1.0 if rng.random() < p else 0.0
        if k == K - 1:
            break
        sel = chosen[: k + 1]
        if cfg.provisional_estimator == "EAP" or cfg.mle_eap_fallback:
            log_post = log_post + _item_logp(grid, P.a[i], P.b[i], P.c[i], x[k], irt.D)
        theta = provisional_estimate(P.a[sel], P.b[sel], P.c[sel], x[: k + 1], cfg, log_post)

    a, b, c = P.a[chosen], P.b[chosen], P.c[chosen]
    theta_final, info, _ = _kernels.mle(a, b, c, x, irt.D, irt.theta_min, irt.theta_max,
                                        cfg.theta_start, 1e-6, 100, 30)
    exposure.counts[chosen] += 1
    exposure.n_examinees += 1
    return AdministrationLog(
        examinee_id=str(ex_id), group=int(g), theta_true=float(theta_true),
        item_ids=[P.ids[i] for i in chosen], responses=x.astype(np.int8),
        theta_prev=theta_prev, theta_final=float(theta_final),
        se_final=1.0 / math.sqrt(info) if info > 0 else math.inf,
    )


def precision_summary(logs: Sequence[AdministrationLog]) -> PrecisionSummary:
    """Bias, MSE, Pearson correlation and mean CSEM of the final estimates."""
    est = np.array([lg.theta_final for lg in logs])
    true = np.array([lg.theta_true for lg in logs])
    err = est - true
    if len(logs) > 1 and est.std() > 0 and true.std() > 0:
        corr = float(np.corrcoef(est, true)[0, 1])
    else:
        corr = float("nan")
    csem = np.array([lg.se_final for lg in logs])
    return PrecisionSummary(float(err.mean()), float(np.mean(err ** 2)), corr, float(csem.mean()))


def simulate_cohort(cohort: Cohort, pool, focal: FocalMap | None, cfg: CatConfig,
                    seed=0, return_tally: bool = False):
    """Administer the CAT to every examinee in order, sharing exposure tallies.

    Returns ``(logs, PrecisionSummary)``, plus the final
    :class:`ExposureTally` when ``return_tally`` is set.
    """
    P = pool if isinstance(pool, PoolArrays) else PoolArrays(pool, focal)
    if cfg.test_length > len(P):
        raise ValueError("test_length exceeds pool size")
    rng = np.random.default_rng(seed)
    tally = ExposureTally.empty(len(P))
    logs = [administer(ex, P, None, cfg, tally, rng) for ex in cohort]
    summary = precision_summary(logs)
    if return_tally:
        return logs, summary, tally
    return logs, summary


LOG_COLUMNS = ["examinee_id", "slot", "item_id", "theta_prev", "response",
               "theta_final", "se_final", "group", "theta_true"]


def write_logs_csv(path, logs: Sequence[AdministrationLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for lg in logs:
            for k, iid, tp, x in lg.slots:
                w.writerow([lg.examinee_id, k, iid, repr(tp), x, repr(lg.theta_final),
                            repr(lg.se_final), lg.group, repr(lg.theta_true)])


def read_logs_csv(path) -> list[AdministrationLog]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["examinee_id"], []).append(row)
    logs = []
    for ex_id, rs in rows.items():
        rs.sort(key=lambda r: int(r["slot"]))
        first = rs[0]
        logs.append(AdministrationLog(
            examinee_id=ex_id, group=int(first["group"]), theta_true=float(first["theta_true"]),
            item_ids=[r["item_id"] for r in rs],
            responses=np.array([int(r["response"]) for r in rs], dtype=np.int8),
            theta_prev=np.array([float(r["theta_prev"]) for r in rs]),
            theta_final=float(first["theta_final"]), se_final=float(first["se_final"]),
        ))
    return logs
