"""Two-level logistic regression by Laplace approximation.

Random effects live at the provisional-ability interval level and are
parameterised through a lower-triangular factor ``Lam`` of their
covariance, ``u_j = Lam @ v_j`` with spherical ``v_j ~ N(0, I)``. For a
given factor the fixed effects and the modes ``v_j`` are found jointly by
penalised IRLS; the Laplace log-likelihood is then

    sum_i loglik_i - 0.5 * sum_j |v_j|^2 - 0.5 * sum_j log det(A_j),
    A_j = Lam' Z_j' W_j Z_j Lam + I,

and the factor itself is optimised with Nelder-Mead. With ``Lam = 0`` the
expression collapses to the ordinary logistic log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit

from . import _kernels
from .glm import check_rank, design_matrix
from .prep import ItemFrame


class NonConvergence(RuntimeError):
    """Outer optimiser did not reach tolerance within its evaluation budget."""


class TooLarge(ValueError):
    """Frame or model exceeds what the quadrature oracle supports."""


@dataclass(frozen=True)
class GlmmSpec:
    name: str
    fixed: tuple
    random: tuple

    @property
    def q(self) -> int:
        return len(self.random)

    @property
    def n_cov(self) -> int:
        return self.q * (self.q + 1) // 2


_INT = ("intercept",)
_IG = ("intercept", "g")
_LR = ("intercept", "g", "theta_K", "theta_K:g")
GLMM_SPECS = {
    "EMPTY": GlmmSpec("EMPTY", _INT, _INT),
    "M1": GlmmSpec("M1", _IG, _INT),
    "M2": GlmmSpec("M2", _IG + ("n_j",), _INT),
    "M3": GlmmSpec("M3", _LR, _INT),
    "M4": GlmmSpec("M4", _LR + ("n_j",), _INT),
    "M5": GlmmSpec("M5", _IG, _IG),
    "M6": GlmmSpec("M6", _IG + ("n_j",), _IG),
    "M7": GlmmSpec("M7", _LR, _IG),
    "M8": GlmmSpec("M8", _LR + ("n_j",), _IG),
}


def icc(tau2: float) -> float:
    """Latent-scale intraclass correlation for a logistic two-level model."""
    if tau2 < 0:
        raise ValueError("variance must be nonnegative")
    return tau2 / (tau2 + math.pi ** 2 / 3.0)


def lam_from_theta(theta, q: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if q == 1:
        return theta.reshape(1, 1)
    if q == 2:
        return np.array([[theta[0], 0.0], [theta[1], theta[2]]])
    raise ValueError("only one or two random effects are supported")


def theta_from_cov(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    q = cov.shape[0]
    L = np.linalg.cholesky(cov + 1e-300 * np.eye(q)) if np.any(cov) else np.zeros((q, q))
    return np.array([L[0, 0]]) if q == 1 else np.array([L[0, 0], L[1, 0], L[1, 1]])


class Problem:
    """Response, designs and cluster layout of one frame/spec pair.

    Rows are sorted by interval so per-cluster sums reduce to
    ``np.add.reduceat`` over contiguous blocks.
    """

    def __init__(self, frame: ItemFrame, spec: GlmmSpec):
        order = np.argsort(frame.j, kind="stable")
        fr = frame.subset(order)
        self.spec = spec
        X, self.names = design_matrix(fr, spec.fixed)
        Z, _ = design_matrix(fr, spec.random)
        self.X, self.Z = np.ascontiguousarray(X), np.ascontiguousarray(Z)
        self.y = fr.y.astype(float)
        levels, cluster = np.unique(fr.j, return_inverse=True)
        self.cluster = cluster.astype(np.int64)
        self.levels = levels
        self.J = len(levels)
        self.starts = np.flatnonzero(np.r_[True, np.diff(self.cluster) != 0])
        self.n, self.p = self.X.shape
        self.q = self.Z.shape[1]
        self.g = fr.g.astype(float)

    def csum(self, arr):
        return np.add.reduceat(arr, self.starts, axis=0)


@dataclass
class InnerState:
    beta: np.ndarray
    v: np.ndarray
    loglik: float  # Laplace marginal log-likelihood
    schur: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def _cond_loglik(y, eta):
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def pirls(prob: Problem, lam: np.ndarray, beta0=None, v0=None, tol=1e-9, max_iter=60) -> InnerState:
    """Jointly maximise the penalised log-likelihood over (beta, v).

    Each Newton step eliminates the per-cluster blocks through a Schur
    complement, so the cost is linear in the number of clusters.
    """
    beta = np.zeros(prob.p) if beta0 is None else np.asarray(beta0, dtype=float)
    v = np.zeros((prob.J, prob.q)) if v0 is None else np.asarray(v0, dtype=float)
    Zt = np.ascontiguousarray(prob.Z @ lam)
    beta, v, ll, S, ok, it, gnorm = _kernels.pirls(
        prob.X, Zt, prob.y, prob.cluster, prob.J, beta, v, float(tol), int(max_iter))
    return InnerState(beta, v, float(ll), S, bool(ok), int(it), float(gnorm))


def cluster_modes(prob: Problem, lam: np.ndarray, beta, v0=None, tol=1e-10, max_iter=60):
    """Conditional modes of v for fixed beta, one small Newton problem per cluster.

    Each cluster takes its own step-halving. Returns ``(v, A)`` with ``A``
    the per-cluster negative Hessians at the modes.
    """
    J, q = prob.J, prob.q
    Zt = prob.Z @ lam
    off = prob.X @ np.asarray(beta, dtype=float)
    v = np.zeros((J, q)) if v0 is None else np.array(v0, dtype=float)
    eye = np.eye(q)

    def cluster_obj(vv):
        eta = off + np.sum(Zt * vv[prob.cluster], axis=1)
        return prob.csum(prob.y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(vv * vv, axis=1), eta

    obj, eta = cluster_obj(v)
    for _ in range(max_iter):
        mu = expit(eta)
        w = mu * (1.0 - mu)
        grad = prob.csum(Zt * (prob.y - mu)[:, None]) - v
        if np.max(np.abs(grad)) < tol:
            break
        A = prob.csum(w[:, None, None] * Zt[:, :, None] * Zt[:, None, :]) + eye
        step = np.linalg.solve(A, grad[:, :, None])[:, :, 0]
        t = np.ones(J)
        for _ in range(30):
            cand = v + t[:, None] * step
            cobj, ceta = cluster_obj(cand)
            bad = cobj < obj - 1e-12 * (1.0 + np.abs(obj))
            if not np.any(bad):
                break
            t = np.where(bad, 0.5 * t, t)
        v, obj, eta = cand, cobj, ceta
    mu = expit(eta)
    w = mu * (1.0 - mu)
    A = prob.csum(w[:, None, None] * Zt[:, :, None] * Zt[:, None, :]) + eye
    return v, A


def laplace_loglik(prob: Problem, theta, beta) -> float:
    """Laplace log-likelihood at fixed (beta, covariance factor)."""
    lam = lam_from_theta(theta, prob.q)
    v, A = cluster_modes(prob, lam, beta)
    eta = prob.X @ np.asarray(beta, dtype=float) + np.sum((prob.Z @ lam) * v[prob.cluster], axis=1)
    return _cond_loglik(prob.y, eta) - 0.5 * float(np.sum(v * v)) - 0.5 * float(np.sum(np.linalg.slogdet(A)[1]))


@dataclass
class GlmmFit:
    name: str
    names: list
    coef: np.ndarray
    se: np.ndarray
    cov_re: np.ndarray
    theta: np.ndarray
    deviance: float
    n_level1: int
    n_level2: int
    n_params: int
    converged: bool
    boundary: bool
    r2_marginal: float
    r2_conditional: float
    tau_total: float
    n_evals: int = 0
    inner_converged: bool = True
    modes: np.ndarray = field(default=None, repr=False)

    @property
    def loglik(self) -> float:
        return -0.5 * self.deviance

    @property
    def aic(self) -> float:
        return self.deviance + 2 * self.n_params

    @property
    def bic(self) -> float:
        return self.deviance + self.n_params * math.log(self.n_level1)

    @property
    def tau0_sq(self) -> float:
        return float(self.cov_re[0, 0])

    @property
    def tau1_sq(self) -> float:
        return float(self.cov_re[1, 1]) if self.cov_re.shape[0] > 1 else float("nan")

    @property
    def tau10(self) -> float:
        return float(self.cov_re[1, 0]) if self.cov_re.shape[0] > 1 else float("nan")

    @property
    def icc(self) -> float:
        return icc(max(self.tau_total, 0.0))

    def estimate(self, term: str) -> float:
        return float(self.coef[self.names.index(term)])

    def std_error(self, term: str) -> float:
        return float(self.se[self.names.index(term)])


def _tau_total(cov_re, g):
    if cov_re.shape[0] == 1:
        return float(cov_re[0, 0])
    return float(cov_re[0, 0] + cov_re[1, 1] * np.mean(g * g) + 2.0 * cov_re[1, 0] * np.mean(g))


def _finish(prob: Problem, spec: GlmmSpec, theta, state: InnerState, n_evals, outer_ok) -> GlmmFit:
    lam = lam_from_theta(theta, prob.q)
    cov_re = lam @ lam.T
    try:
        cov_beta = linalg.inv(state.schur)
        se = np.sqrt(np.clip(np.diag(cov_beta), 0.0, None))
    except linalg.LinAlgError:
        se = np.full(prob.p, np.nan)
    fixed_lp = prob.X @ state.beta
    var_f = float(np.var(fixed_lp))
    tau_total = _tau_total(cov_re, prob.g)
    denom = var_f + max(tau_total, 0.0) + math.pi ** 2 / 3.0
    diag = np.diag(cov_re)
    boundary = bool(np.any(diag < 1e-6))
    if prob.q == 2 and not boundary:
        corr = cov_re[1, 0] / math.sqrt(diag[0] * diag[1])
        boundary = bool(abs(corr) > 1 - 1e-6)
    finite = np.all(np.isfinite(state.beta)) and np.all(np.isfinite(se)) and math.isfinite(state.loglik)
    return GlmmFit(
        name=spec.name, names=list(prob.names), coef=state.beta.copy(), se=se,
        cov_re=cov_re, theta=np.asarray(theta, dtype=float), deviance=-2.0 * state.loglik,
        n_level1=prob.n, n_level2=prob.J, n_params=prob.p + spec.n_cov,
        converged=bool(outer_ok and state.converged and finite), boundary=boundary,
        r2_marginal=var_f / denom, r2_conditional=(var_f + max(tau_total, 0.0)) / denom,
        tau_total=tau_total, n_evals=n_evals, inner_converged=state.converged,
        modes=state.v @ lam.T,
    )


def fit_glmm(frame: ItemFrame, spec: GlmmSpec | str, tau_zero: bool = False,
             restarts: int = 3, max_evals: int = 500, tol: float = 1e-6,
             theta0=None, seed: int = 0) -> GlmmFit:
    """Fit a two-level logistic model to one item's frame.

    The covariance factor is optimised by Nelder-Mead on the deviance;
    after the first run up to ``restarts`` further runs start from a
    randomly perturbed incumbent, stopping at the first one that fails to
    improve. ``tau_zero`` pins the random-effect covariance at zero, which
    reproduces the single-level fit on the same fixed terms.

    Raises :class:`NonConvergence` when the optimiser exhausts
    ``max_evals`` deviance evaluations without meeting ``tol``.
    """
    if isinstance(spec, str):
        spec = GLMM_SPECS[spec]
    prob = Problem(frame, spec)
    check_rank(prob.X)
    if tau_zero:
        theta = np.zeros(spec.n_cov)
        state = pirls(prob, lam_from_theta(theta, prob.q))
        return _finish(prob, spec, theta, state, 1, True)

    cache = {"beta": None, "v": None}
    n_evals = [0]

    def deviance(th):
        n_evals[0] += 1
        st = pirls(prob, lam_from_theta(th, prob.q), cache["beta"], cache["v"])
        if not math.isfinite(st.loglik):
            return 1e300
        cache["beta"], cache["v"] = st.beta, st.v
        return -2.0 * st.loglik

    if theta0 is None:
        theta0 = np.array([1.0]) if prob.q == 1 else np.array([1.0, 0.0, 1.0])
    rng = np.random.default_rng(seed)
    best_x = np.asarray(theta0, dtype=float)
    best_f = np.inf
    outer_ok = False
    start = best_x
    for attempt in range(restarts + 1):
        budget = max_evals - n_evals[0]
        if budget <= 0:
            break
        # stop on the deviance spread alone: at a boundary the factor has
        # flat directions (l11 = 0 leaves only l21^2 + l22^2 identified)
        res = optimize.minimize(
            deviance, start, method="Nelder-Mead",
            options=dict(maxfev=budget, xatol=np.inf, fatol=2.0 * tol,
                         initial_simplex=_simplex(start)),
        )
        improved = res.fun < best_f - 2.0 * tol
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
        outer_ok = outer_ok or res.status == 0
        if attempt > 0 and not improved:
            break
        if res.status != 0:
            continue
        start = best_x + rng.normal(0.0, 0.1, size=best_x.shape)
    if not outer_ok:
        raise NonConvergence(f"{spec.name}: outer optimisation did not converge in {max_evals} evaluations")
    best_x = _canonical(best_x, prob.q)
    state = pirls(prob, lam_from_theta(best_x, prob.q), cache["beta"], cache["v"])
    return _finish(prob, spec, best_x, state, n_evals[0], outer_ok)


def _simplex(x0):
    x0 = np.asarray(x0, dtype=float)
    pts = [x0]
    for i in range(len(x0)):
        e = x0.copy()
        e[i] += 0.25 if abs(x0[i]) < 0.05 else 0.25 * abs(x0[i]) + 0.05
        pts.append(e)
    return np.array(pts)


def _canonical(theta, q):
    # sign flips of a Cholesky column leave Lam Lam' unchanged
    theta = np.array(theta, dtype=float)
    if q == 1:
        return np.abs(theta)
    if theta[0] < 0:
        theta[0], theta[1] = -theta[0], -theta[1]
    theta[2] = abs(theta[2])
    return theta


# -- quadrature oracle ------------------------------------------------------

def oracle_loglik(frame: ItemFrame, spec: GlmmSpec | str, beta, theta, n_nodes: int | None = None) -> float:
    """Marginal log-likelihood by adaptive Gauss-Hermite quadrature.

    Independent of the Laplace path: modes come from a generic optimiser,
    and each cluster integral is evaluated on a node grid (61 nodes for one
    random effect, 31 x 31 for two) centred and scaled at the mode.
    """
    if isinstance(spec, str):
        spec = GLMM_SPECS[spec]
    q = spec.q
    clusters = np.unique(frame.j)
    if q > 2 or len(clusters) > 20 or (q == 2 and len(clusters) > 10):
        raise TooLarge("oracle supports q<=2 with at most 20 (q=1) or 10 (q=2) clusters")
    X, _ = design_matrix(frame, spec.fixed)
    Z, _ = design_matrix(frame, spec.random)
    lam = lam_from_theta(theta, q)
    beta = np.asarray(beta, dtype=float)
    n_nodes = n_nodes or (61 if q == 1 else 31)
    x1, w1 = np.polynomial.hermite.hermgauss(n_nodes)
    if q == 1:
        nodes, weights = x1[:, None], w1
    else:
        gx, gy = np.meshgrid(x1, x1, indexing="ij")
        nodes = np.column_stack([gx.ravel(), gy.ravel()])
        weights = np.outer(w1, w1).ravel()
    total = 0.0
    for cl in clusters:
        m = frame.j == cl
        off = X[m] @ beta
        Zt = Z[m] @ lam
        y = frame.y[m].astype(float)

        def h(v):
            eta = off + Zt @ v
            return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * v @ v) - 0.5 * q * math.log(2 * math.pi)

        res = optimize.minimize(lambda v: -h(v), np.zeros(q), method="BFGS", options=dict(gtol=1e-10))
        vhat = res.x
        mu = expit(off + Zt @ vhat)
        A = (Zt * (mu * (1 - mu))[:, None]).T @ Zt + np.eye(q)
        L = np.linalg.cholesky(np.linalg.inv(A))
        pts = vhat[None, :] + math.sqrt(2.0) * nodes @ L.T
        eta = off[:, None] + Zt @ pts.T
        hv = (np.sum(y[:, None] * eta - np.logaddexp(0.0, eta), axis=0)
              - 0.5 * np.sum(pts * pts, axis=1) - 0.5 * q * math.log(2 * math.pi))
        logterms = hv + np.sum(nodes * nodes, axis=1) + np.log(weights)
        mx = logterms.max()
        total += mx + math.log(np.sum(np.exp(logterms - mx))) + 0.5 * q * math.log(2.0) + float(np.sum(np.log(np.diag(L))))
    return total


def fit_by_quadrature(frame: ItemFrame, spec: GlmmSpec | str, start: GlmmFit | None = None, n_nodes=None):
    """Maximise :func:`oracle_loglik` over fixed effects and covariance factor.

    Slow; meant for checking Laplace fits on small frames.
    Returns ``(beta, cov_re, loglik)``.
    """
    if isinstance(spec, str):
        spec = GLMM_SPECS[spec]
    if start is None:
        start = fit_glmm(frame, spec)
    p = len(start.coef)
    x0 = np.r_[start.coef, start.theta]

    def negll(x):
        return -oracle_loglik(frame, spec, x[:p], x[p:], n_nodes)

    res = optimize.minimize(negll, x0, method="BFGS", options=dict(gtol=1e-6))
    lam = lam_from_theta(res.x[p:], spec.q)
    return res.x[:p], lam @ lam.T, -res.fun


# -- screening --------------------------------------------------------------

@dataclass
class IccScreen:
    rho: dict
    failed: list

    @property
    def summary(self) -> dict:
        v = np.array(list(self.rho.values()))
        if len(v) == 0:
            return dict(n=0, mean=float("nan"), variance=float("nan"), share_above_0_2=float("nan"))
        return dict(n=len(v), mean=float(v.mean()), variance=float(v.var(ddof=1)) if len(v) > 1 else float("nan"),
                    share_above_0_2=float(np.mean(v > 0.2)))


def icc_screen(frames: Mapping[str, ItemFrame]) -> IccScreen:
    """Fit the empty model to every frame and collect the ICCs."""
    rho, failed = {}, []
    for iid in sorted(frames):
        try:
            fit = fit_glmm(frames[iid], GLMM_SPECS["EMPTY"])
        except (NonConvergence, ValueError, np.linalg.LinAlgError):
            failed.append(iid)
            continue
        if fit.converged:
            rho[iid] = fit.icc
        else:
            failed.append(iid)
    return IccScreen(rho, failed)
