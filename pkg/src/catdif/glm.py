"""Single-level logistic DIF models fitted by IRLS.

Covers the final-ability LR model (S1, identical to the logistic-regression
DIF model with an ability-by-group interaction), its provisional-ability
variants (S2, S3), and the logistic reformulation of Mantel-Haenszel with
stratified final ability (MH).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit
from scipy.stats import norm, rankdata

from .prep import ItemFrame


class RankDeficient(ValueError):
    """Design matrix columns are linearly dependent."""


class DegenerateStrata(ValueError):
    """Too few distinct ability values for the requested strata."""


TERMS = ("intercept", "g", "n_j", "theta_K", "theta_K:g", "theta_s", "theta_s:g", "strata")


@dataclass(frozen=True)
class GlmSpec:
    name: str
    terms: tuple
    n_strata: int = 5

    def __post_init__(self):
        bad = [t for t in self.terms if t not in TERMS]
        if bad:
            raise ValueError(f"unknown terms {bad}")


_S1 = ("intercept", "g", "theta_K", "theta_K:g")
GLM_SPECS = {
    "S1": GlmSpec("S1", _S1),
    "S2": GlmSpec("S2", _S1 + ("theta_s",)),
    "S3": GlmSpec("S3", ("intercept", "g", "theta_s", "theta_s:g")),
    "MH": GlmSpec("MH", ("intercept", "strata", "g")),
    "LR_ALT": GlmSpec("LR_ALT", _S1),
}


def make_strata(theta_K, L: int = 5) -> np.ndarray:
    """Equal-frequency strata labels 1..L; tied values share a stratum."""
    theta_K = np.asarray(theta_K, dtype=float)
    if L < 2:
        raise ValueError("need at least two strata")
    if len(np.unique(theta_K)) < L:
        raise DegenerateStrata(f"{len(np.unique(theta_K))} distinct values for {L} strata")
    rank = rankdata(theta_K, method="average") - 1.0
    return (np.floor(rank * L / len(theta_K)).astype(int) + 1).clip(1, L)


def design_matrix(frame: ItemFrame, terms, n_strata: int = 5):
    """Columns for ``terms`` evaluated on ``frame``; returns ``(X, names)``."""
    n = len(frame)
    cols, names = [], []
    g = frame.g.astype(float)
    for t in terms:
        if t == "intercept":
            cols.append(np.ones(n)); names.append(t)
        elif t == "g":
            cols.append(g); names.append(t)
        elif t == "n_j":
            cols.append(frame.n_j); names.append(t)
        elif t == "theta_K":
            cols.append(frame.theta_K.astype(float)); names.append(t)
        elif t == "theta_K:g":
            cols.append(frame.theta_K * g); names.append(t)
        elif t == "theta_s":
            cols.append(frame.theta_s.astype(float)); names.append(t)
        elif t == "theta_s:g":
            cols.append(frame.theta_s * g); names.append(t)
        elif t == "strata":
            labels = make_strata(frame.theta_K, n_strata)
            for s in range(2, n_strata + 1):
                if np.any(labels == s):
                    cols.append((labels == s).astype(float)); names.append(f"stratum_{s}")
        else:
            raise ValueError(f"unknown term {t!r}")
    return np.column_stack(cols) if cols else np.empty((n, 0)), names


def check_rank(X: np.ndarray) -> None:
    if X.shape[1] == 0:
        return
    _, R, _ = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d[0] * max(X.shape) * np.finfo(float).eps * 1e3
    if d[0] == 0 or np.sum(d > tol) < X.shape[1]:
        raise RankDeficient(f"design has rank {int(np.sum(d > tol))} < {X.shape[1]} columns")


@dataclass
class GlmFit:
    name: str
    names: list
    coef: np.ndarray
    se: np.ndarray
    deviance: float
    n: int
    converged: bool
    iterations: int
    separated: bool = False

    @property
    def n_params(self) -> int:
        return len(self.coef)

    @property
    def aic(self) -> float:
        return self.deviance + 2 * self.n_params

    @property
    def bic(self) -> float:
        return self.deviance + self.n_params * math.log(self.n)

    @property
    def loglik(self) -> float:
        return -0.5 * self.deviance

    def estimate(self, term: str) -> float:
        return float(self.coef[self.names.index(term)])

    def std_error(self, term: str) -> float:
        return float(self.se[self.names.index(term)])


def irls(X, y, weights=None, tol=1e-8, max_iter=50, beta0=None):
    """Logistic IRLS (Newton) with step-halving on deviance increase.

    Returns ``(beta, cov, deviance, converged, iterations, history)``.
    ``weights`` are optional prior case weights.
    """
    y = np.asarray(y, dtype=float)
    wcase = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    eta = X @ beta
    dev = _weighted_dev(y, eta, wcase)
    history = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        w = wcase * mu * (1.0 - mu)
        H = X.T @ (w[:, None] * X)
        grad = X.T @ (wcase * (y - mu))
        try:
            with warnings.catch_warnings():
                # near-separated fits are ill-conditioned by nature; flagged below
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        for _ in range(30):
            cand = beta + step
            eta_c = X @ cand
            dev_c = _weighted_dev(y, eta_c, wcase)
            if dev_c <= dev + 1e-10 * (1 + abs(dev)):
                break
            step = step * 0.5
        beta, eta, dev = cand, eta_c, dev_c
        history.append(dev)
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    mu = expit(eta)
    w = wcase * mu * (1.0 - mu)
    H = X.T @ (w[:, None] * X)
    try:
        cov = linalg.inv(H)
    except linalg.LinAlgError:
        cov = np.full(H.shape, np.nan)
    return beta, cov, dev, converged, it, history


def _weighted_dev(y, eta, w):
    return float(2.0 * np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))


def fit_glm(frame: ItemFrame, spec: GlmSpec | str) -> GlmFit:
    """Fit a single-level logistic model to one item's frame.

    Raises :class:`RankDeficient` for collinear designs. A fit that fails
    to converge with some coefficient beyond 15 in magnitude is marked
    ``separated`` (and not converged).
    """
    if isinstance(spec, str):
        spec = GLM_SPECS[spec]
    X, names = design_matrix(frame, spec.terms, spec.n_strata)
    check_rank(X)
    y = frame.y.astype(float)
    beta, cov, dev, converged, it, _ = irls(X, y)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    separated = (not converged) and bool(np.any(np.abs(beta) > 15))
    if not np.all(np.isfinite(beta)) or not np.all(np.isfinite(se)):
        converged = False
    return GlmFit(spec.name, names, beta, se, dev, len(y), converged, it, separated)


def wald_test(fit, term: str = "g"):
    """Two-sided Wald z test of one coefficient; returns ``(z, p)``."""
    est = fit.estimate(term)
    se = fit.std_error(term)
    if est == 0.0:
        return 0.0, 1.0
    if not se > 0 or not math.isfinite(se):
        return float("nan"), float("nan")
    z = est / se
    return z, float(2.0 * norm.sf(abs(z)))

