"""Three-parameter logistic (3PL) item response model.

Response probabilities, log-likelihoods, Fisher information and the two
ability estimators used by the CAT engine (Newton-Raphson MLE and
fixed-grid EAP).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels


@dataclass(frozen=True)
class Item:
    """Calibrated 3PL item."""

    id: str
    a: float
    b: float
    c: float = 0.0
    category: int = 0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"item {self.id}: discrimination must be positive, got {self.a}")
        if not 0.0 <= self.c < 1.0:
            raise ValueError(f"item {self.id}: guessing must lie in [0, 1), got {self.c}")
        if not math.isfinite(self.b):
            raise ValueError(f"item {self.id}: difficulty must be finite")


@dataclass(frozen=True)
class IrtConfig:
    D: float = 1.0
    theta_min: float = -4.0
    theta_max: float = 4.0
    quad_points: int = 81

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError("D must be positive")
        if not self.theta_min < self.theta_max:
            raise ValueError("theta_min must be below theta_max")
        if self.quad_points < 2:
            raise ValueError("quad_points must be at least 2")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.theta_min, self.theta_max, self.quad_points)


@dataclass
class ResponseVector:
    """Ordered (item, response) pairs, stored column-wise for vectorised math."""

    ids: list = field(default_factory=list)
    a: np.ndarray = field(default_factory=lambda: np.empty(0))
    b: np.ndarray = field(default_factory=lambda: np.empty(0))
    c: np.ndarray = field(default_factory=lambda: np.empty(0))
    x: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        n = len(self.ids)
        if not (len(self.a) == len(self.b) == len(self.c) == len(self.x) == n):
            raise ValueError("response vector columns differ in length")
        if n and not np.all((self.x == 0) | (self.x == 1)):
            raise ValueError("responses must be 0 or 1")
        if len(set(self.ids)) != n:
            raise ValueError("items within a response vector must be distinct")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Item, int]]) -> "ResponseVector":
        pairs = list(pairs)
        return cls(
            ids=[it.id for it, _ in pairs],
            a=[it.a for it, _ in pairs],
            b=[it.b for it, _ in pairs],
            c=[it.c for it, _ in pairs],
            x=[x for _, x in pairs],
        )

    @classmethod
    def from_items(cls, items: Sequence[Item], responses: Sequence[int]) -> "ResponseVector":
        if len(items) != len(responses):
            raise ValueError("items and responses differ in length")
        return cls.from_pairs(zip(items, responses))

    def __len__(self):
        return len(self.ids)

    def concat(self, other: "ResponseVector") -> "ResponseVector":
        return ResponseVector(
            ids=list(self.ids) + list(other.ids),
            a=np.concatenate([self.a, other.a]),
            b=np.concatenate([self.b, other.b]),
            c=np.concatenate([self.c, other.c]),
            x=np.concatenate([self.x, other.x]),
        )


class MLEResult(NamedTuple):
    theta: float
    se: float
    converged: bool


class EAPResult(NamedTuple):
    theta: float
    se: float


# -- array kernels ----------------------------------------------------------
# These take raw parameter arrays so the CAT engine can skip object overhead.

def prob_array(theta, a, b, c, D=1.0):
    """3PL probability, broadcasting over theta and item parameters."""
    return c + (1.0 - c) * expit(D * a * (theta - b))


def info_array(theta, a, b, c, D=1.0):
    z = expit(D * a * (theta - b))
    p = c + (1.0 - c) * z
    # (P - c)/(1 - c) == z; written this way to avoid 0/0 when P saturates
    return (D * a) ** 2 * z * z * (1.0 - p) / p


def loglik_array(theta, a, b, c, x, D=1.0):
    z = D * a * (theta - b)
    # log P and log(1-P) with P = c + (1-c) sigmoid(z), stable for large |z|
    log_sig = -np.logaddexp(0.0, -z)
    log_1m_sig = -np.logaddexp(0.0, z)
    with np.errstate(divide="ignore"):
        log_c = np.log(c)
        log_1mc = np.log1p(-c)
    log_p = np.logaddexp(log_c, log_1mc + log_sig)
    log_q = log_1mc + log_1m_sig
    return float(np.sum(x * log_p + (1.0 - x) * log_q))


def _score_and_curvature(theta, a, b, c, x, D):
    """First and second derivative of the log-likelihood in theta."""
    z = expit(D * a * (theta - b))
    p = c + (1.0 - c) * z
    q = 1.0 - p
    dp = D * a * (1.0 - c) * z * (1.0 - z)
    d2p = D * a * dp * (1.0 - 2.0 * z)
    resid = x / p - (1.0 - x) / q
    score = float(np.sum(resid * dp))
    second = float(np.sum(resid * d2p - dp * dp * (x / (p * p) + (1.0 - x) / (q * q))))
    info = float(np.sum(dp * dp / (p * q)))
    return score, second, info


def mle_arrays(a, b, c, x, cfg: IrtConfig, start=0.0, tol=1e-6, max_iter=100, max_halvings=30):
    """Newton-Raphson MLE on raw arrays; see :func:`estimate_mle`."""
    if len(x) == 0:
        raise ValueError("MLE needs at least one response")
    theta, info, ok = _kernels.mle(
        np.ascontiguousarray(a, dtype=float), np.ascontiguousarray(b, dtype=float),
        np.ascontiguousarray(c, dtype=float), np.ascontiguousarray(x, dtype=float),
        float(cfg.D), float(cfg.theta_min), float(cfg.theta_max), float(start),
        float(tol), int(max_iter), int(max_halvings))
    return MLEResult(float(theta), _se_from_info(info), bool(ok))


def _se_from_info(info):
    return 1.0 / math.sqrt(info) if info > 0 else math.inf


def eap_arrays(a, b, c, x, cfg: IrtConfig, prior_mean=0.0, prior_sd=1.0):
    if not prior_sd > 0:
        raise ValueError("prior_sd must be positive")
    grid = cfg.grid
    log_post = -0.5 * ((grid - prior_mean) / prior_sd) ** 2
    if len(x):
        p = prob_array(grid[:, None], a[None, :], b[None, :], c[None, :], cfg.D)
        log_post = log_post + np.sum(np.where(x[None, :] == 1, np.log(p), np.log1p(-p)), axis=1)
    return eap_from_logpost(grid, log_post)


def eap_from_logpost(grid, log_post):
    w = np.exp(log_post - log_post.max())
    w /= w.sum()
    mean = float(np.dot(w, grid))
    sd = math.sqrt(max(float(np.dot(w, (grid - mean) ** 2)), 0.0))
    return EAPResult(mean, sd)


# -- public item-level API --------------------------------------------------

def prob_correct(theta: float, item: Item, cfg: IrtConfig = IrtConfig()) -> float:
    """Probability of a correct response to ``item`` at ability ``theta``."""
    return float(prob_array(theta, item.a, item.b, item.c, cfg.D))


def log_likelihood(theta: float, responses: ResponseVector, cfg: IrtConfig = IrtConfig()) -> float:
    """Log of the local-independence likelihood of ``responses`` at ``theta``.

    An empty vector has likelihood one, so its log-likelihood is 0.
    """
    if len(responses) == 0:
        return 0.0
    return loglik_array(theta, responses.a, responses.b, responses.c, responses.x, cfg.D)


def score(theta: float, responses: ResponseVector, cfg: IrtConfig = IrtConfig()) -> float:
    """Derivative of :func:`log_likelihood` with respect to theta."""
    if len(responses) == 0:
        return 0.0
    return _score_and_curvature(theta, responses.a, responses.b, responses.c, responses.x, cfg.D)[0]


def fisher_information(theta: float, item: Item, cfg: IrtConfig = IrtConfig()) -> float:
    return float(info_array(theta, item.a, item.b, item.c, cfg.D))


def test_information(theta: float, items: Sequence[Item], cfg: IrtConfig = IrtConfig()) -> float:
    """Sum of item informations at ``theta``."""
    if not items:
        return 0.0
    a = np.array([it.a for it in items])
    b = np.array([it.b for it in items])
    c = np.array([it.c for it in items])
    return float(np.sum(info_array(theta, a, b, c, cfg.D)))


test_information.__test__ = False  # keep pytest from collecting it


def estimate_mle(responses: ResponseVector, cfg: IrtConfig = IrtConfig(), start: float = 0.0) -> MLEResult:
    """Maximum likelihood ability estimate by safeguarded Newton-Raphson.

    Steps are halved (up to 30 times) whenever they would lower the
    log-likelihood; iterates are kept inside ``[theta_min, theta_max]``.
    Where the observed curvature is not negative the expected (Fisher)
    information is used in its place.

    Returns
    -------
    MLEResult
        ``(theta, se, converged)``; ``converged`` is false for estimates
        pinned at a bound, which includes every all-correct or
        all-incorrect pattern.
    """
    return mle_arrays(responses.a, responses.b, responses.c, responses.x, cfg, start=start)


def estimate_eap(responses: ResponseVector, cfg: IrtConfig = IrtConfig(),
                 prior_mean: float = 0.0, prior_sd: float = 1.0) -> EAPResult:
    """Posterior mean and SD on the equally spaced ability grid of ``cfg``."""
    return eap_arrays(responses.a, responses.b, responses.c, responses.x, cfg, prior_mean, prior_sd)
