"""
DRSYNTH - Baseline Forecasters
Historical average, equal-weight linear pool, sequential BMA over the subgroup
agents, expanding-window LASSO with leave-one-out selection, and PCA factor
regression. The full-model DLM baseline is a dlm_engine run on the unpartitioned
predictor set.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp
from sklearn.linear_model import lasso_path
from sklearn.model_selection import LeaveOneOut

from dlm_engine import DiscountConfig, DLMPosterior, StudentTDensity, filter_step, forecast_density
from errors import ConvergenceError, DataValidationError, NumericalError

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8
MIN_LASSO_DOF = 3.0


# ============================================================================
# HISTORICAL AVERAGE
# ============================================================================

def historical_average(y: Sequence[float], variance_floor: float = VARIANCE_FLOOR) -> StudentTDensity:
    """Expanding mean with the sample variance as scale and count-1 degrees of freedom"""
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        raise DataValidationError(f"historical average needs at least 2 observations, got {len(y)}")
    return StudentTDensity(dof=float(len(y) - 1), location=float(np.mean(y)),
                           scale=max(float(np.var(y, ddof=1)), variance_floor))


# ============================================================================
# LINEAR POOLS AND BMA
# ============================================================================

@dataclass(frozen=True)
class LinearPool:
    """Finite mixture sum_j w_j h_j of agent densities"""
    components: Tuple[StudentTDensity, ...]
    weights: np.ndarray

    def __post_init__(self):
        if len(self.components) == 0:
            raise DataValidationError("a linear pool needs at least one component")
        if len(self.weights) != len(self.components):
            raise DataValidationError("pool weights and components differ in length")

    def logpdf(self, y: float) -> float:
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        terms = np.array([float(h.logpdf(y)) for h in self.components]) + log_w
        return float(logsumexp(terms))

    def mean(self) -> float:
        return float(np.dot(self.weights, [h.mean() for h in self.components]))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        which = rng.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(size)
        for j, h in enumerate(self.components):
            mask = which == j
            if mask.any():
                out[mask] = h.sample(rng, int(mask.sum()))
        return out


def equal_weight_pool(densities: Sequence[StudentTDensity], y: float) -> Tuple[float, LinearPool]:
    pool = LinearPool(components=tuple(densities), weights=np.full(len(densities), 1.0 / len(densities)))
    return pool.logpdf(y), pool


@dataclass(frozen=True)
class BMAState:
    """Model probabilities and the cumulative log predictive likelihood of each agent"""
    weights: np.ndarray
    log_likelihood: np.ndarray

    @classmethod
    def uniform(cls, J: int) -> "BMAState":
        return cls(weights=np.full(J, 1.0 / J), log_likelihood=np.zeros(J))

    def pool(self, densities: Sequence[StudentTDensity]) -> LinearPool:
        return LinearPool(components=tuple(densities), weights=self.weights)


def bma_step(state: BMAState, densities: Sequence[StudentTDensity], y: float) -> Tuple[BMAState, float]:
    """Score y under the current mixture, then reweight by each agent's predictive likelihood"""
    if len(densities) != len(state.weights):
        raise DataValidationError(f"{len(densities)} densities for {len(state.weights)} BMA weights")
    log_h = np.array([float(h.logpdf(y)) for h in densities])
    with np.errstate(divide="ignore"):
        log_post = np.log(state.weights) + log_h
    score = float(logsumexp(log_post))
    if not np.isfinite(score):
        raise NumericalError("BMA posterior mass vanished for every model")
    weights = np.exp(log_post - score)
    weights /= weights.sum()
    return BMAState(weights=weights, log_likelihood=state.log_likelihood + log_h), score


def bma_lagged_weights(densities: Sequence[Sequence[StudentTDensity]], y: Sequence[float], k: int) -> np.ndarray:
    """Weights used for target i: the BMA state after targets up to i-k have been observed

    densities[i] holds the J agent densities for target i.
    """
    T = len(densities)
    J = len(densities[0])
    states = [BMAState.uniform(J)]
    for i in range(T):
        state, _ = bma_step(states[-1], densities[i], y[i])
        states.append(state)
    # states[r] has seen targets 0..r-1
    return np.array([states[max(i - k + 1, 0)].weights for i in range(T)])


# ============================================================================
# LASSO
# ============================================================================

@dataclass(frozen=True)
class LassoFit:
    lam: float
    coefficients: np.ndarray
    intercept: float
    residual_variance: float
    n_obs: int
    window: str = ""
    kkt_gap: float = 0.0
    objective_path: Tuple[float, ...] = field(default=(), compare=False)

    @property
    def active_size(self) -> int:
        return int(np.count_nonzero(self.coefficients))

    def predict(self, x: np.ndarray) -> float:
        return float(self.intercept + np.asarray(x, dtype=np.float64) @ self.coefficients)


def _soft_threshold(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def _lasso_objective(resid: np.ndarray, beta: np.ndarray, lam: float) -> float:
    return float(resid @ resid / (2.0 * len(resid)) + lam * np.abs(beta).sum())


def lasso_kkt_gap(Xc: np.ndarray, resid: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Largest violation of the subgradient conditions on centered data"""
    grad = Xc.T @ resid / len(resid)
    active = beta != 0.0
    gap = np.where(active, np.abs(grad - lam * np.sign(beta)), np.maximum(np.abs(grad) - lam, 0.0))
    return float(gap.max()) if len(gap) else 0.0


def lasso_lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    Xc = X - X.mean(axis=0)
    return float(np.max(np.abs(Xc.T @ (y - y.mean()))) / len(y))


def lasso_lambda_grid(X: np.ndarray, y: np.ndarray, size: int = 100, min_ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced penalties from lambda_max down to lambda_max * min_ratio (descending)"""
    lam_max = lasso_lambda_max(X, y)
    if lam_max <= 0.0:
        return np.array([0.0])
    return np.logspace(np.log10(lam_max), np.log10(lam_max * min_ratio), num=size)


def lasso_fit(X: np.ndarray, y: np.ndarray, lam: float, max_sweeps: int = 10000, tol: float = 1e-10,
              variance_floor: float = VARIANCE_FLOOR, window: str = "") -> LassoFit:
    """Cyclic coordinate descent for (1/2n)||y - X b - b0||^2 + lam ||b||_1, b0 unpenalized

    Sweeps until the KKT gap drops below `tol`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise DataValidationError(f"LASSO needs at least 2 rows, got {n}")
    if lam < 0:
        raise DataValidationError(f"LASSO penalty must be >= 0, got {lam}")

    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    col_sq = np.einsum("ij,ij->j", Xc, Xc) / n

    beta = np.zeros(p)
    resid = yc - Xc @ beta
    objective = [_lasso_objective(resid, beta, lam)]
    gap = lasso_kkt_gap(Xc, resid, beta, lam)

    sweeps = 0
    while gap > tol and sweeps < max_sweeps:
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho = Xc[:, j] @ resid / n + col_sq[j] * old
            beta[j] = _soft_threshold(rho, lam) / col_sq[j]
            if beta[j] != old:
                resid -= Xc[:, j] * (beta[j] - old)
        sweeps += 1
        objective.append(_lasso_objective(resid, beta, lam))
        gap = lasso_kkt_gap(Xc, resid, beta, lam)

    if gap > tol:
        raise ConvergenceError(f"LASSO coordinate descent stopped after {sweeps} sweeps (lambda={lam:.3e})", gap)

    active = int(np.count_nonzero(beta))
    denom = n - active - 1
    rss = float(resid @ resid)
    residual_variance = max(rss / denom if denom > 0 else rss / n, variance_floor)
    return LassoFit(lam=float(lam), coefficients=beta, intercept=y_mean - float(x_mean @ beta),
                    residual_variance=residual_variance, n_obs=n, window=window,
                    kkt_gap=gap, objective_path=tuple(objective))


def _loo_fold_errors(X: np.ndarray, y: np.ndarray, train: np.ndarray, test: np.ndarray,
                     grid: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    X_tr, y_tr = X[train], y[train]
    x_mean, y_mean = X_tr.mean(axis=0), y_tr.mean()
    _, coefs, _ = lasso_path(X_tr - x_mean, y_tr - y_mean, alphas=grid, tol=tol, max_iter=max_iter)
    pred = y_mean + (X[test] - x_mean) @ coefs
    return (y[test][:, None] - pred).ravel() ** 2


def lasso_loo_errors(X: np.ndarray, y: np.ndarray, grid: np.ndarray, tol: float = 1e-8,
                     max_iter: int = 10000, n_jobs: int = 1) -> np.ndarray:
    """Leave-one-out mean squared prediction error at each grid penalty, in the order of `grid`"""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    # lasso_path solves from the largest penalty down
    order = np.argsort(-grid, kind="stable")
    folds = Parallel(n_jobs=n_jobs)(
        delayed(_loo_fold_errors)(X, y, train, test, grid[order], tol, max_iter)
        for train, test in LeaveOneOut().split(X)
    )
    errors = np.empty(len(grid))
    errors[order] = np.mean(folds, axis=0)
    return errors


def lasso_loo_select(X: np.ndarray, y: np.ndarray, grid: Sequence[float], tol: float = 1e-8,
                     max_iter: int = 10000, n_jobs: int = 1) -> float:
    """Penalty minimizing the LOO error; ties go to the larger penalty"""
    grid = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    if len(grid) == 0:
        raise DataValidationError("LASSO penalty grid is empty")
    X = np.asarray(X, dtype=np.float64)
    constant = np.flatnonzero(np.ptp(X, axis=0) == 0.0)
    if len(constant):
        raise DataValidationError(f"LASSO design has zero-variance columns {constant.tolist()}")
    if len(grid) == 1:
        return float(grid[0])

    errors = lasso_loo_errors(X, y, grid, tol=tol, max_iter=max_iter, n_jobs=n_jobs)
    best = errors.min()
    tied = np.flatnonzero(errors <= best + 1e-12 * max(abs(best), 1e-300))
    return float(grid[tied[0]])


def lasso_predictive_density(fit: LassoFit, x_new: np.ndarray) -> StudentTDensity:
    dof = max(float(fit.n_obs - fit.active_size - 1), MIN_LASSO_DOF)
    return StudentTDensity(dof=dof, location=fit.predict(x_new), scale=fit.residual_variance)


def lasso_forecast(X: np.ndarray, y: np.ndarray, x_new: np.ndarray, grid_size: int = 100,
                   min_ratio: float = 1e-4, max_sweeps: int = 10000, tol: float = 1e-10,
                   variance_floor: float = VARIANCE_FLOOR, window: str = "") -> Tuple[StudentTDensity, LassoFit]:
    """Standardize on the training window, select by LOO, refit, and issue a density for x_new"""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    if np.any(sd == 0.0):
        raise DataValidationError(f"LASSO design has zero-variance columns {np.flatnonzero(sd == 0.0).tolist()}")
    Z = (X - mean) / sd
    z_new = (np.asarray(x_new, dtype=np.float64) - mean) / sd

    grid = lasso_lambda_grid(Z, y, size=grid_size, min_ratio=min_ratio)
    lam = lasso_loo_select(Z, y, grid)
    fit = lasso_fit(Z, y, lam, max_sweeps=max_sweeps, tol=tol, variance_floor=variance_floor, window=window)
    return lasso_predictive_density(fit, z_new), fit


# ============================================================================
# PCA FACTOR REGRESSION
# ============================================================================

@dataclass(frozen=True)
class FactorModel:
    n_factors: int
    loadings: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    singular_values: np.ndarray

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        power = self.singular_values ** 2
        return power[: self.n_factors] / power.sum()

    def scores(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self.means) / self.scales) @ self.loadings


def pca_decompose(X: np.ndarray, n_factors: int, rank_tol: float = 1e-10) -> FactorModel:
    """Leading right singular vectors of the standardized window"""
    X = np.asarray(X, dtype=np.float64)
    rows, p = X.shape
    if not 1 <= n_factors <= min(p, rows):
        raise DataValidationError(f"cannot extract {n_factors} factors from a {rows}x{p} window")

    means = X.mean(axis=0)
    scales = X.std(axis=0)
    scales = np.where(scales > 0.0, scales, 1.0)
    _, s, Vt = np.linalg.svd((X - means) / scales, full_matrices=False)

    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300)))
    if rank < n_factors:
        raise DataValidationError(f"predictor window has rank {rank}, below the {n_factors} requested factors")

    loadings = Vt[:n_factors].T.copy()
    # fix SVD sign ambiguity: largest-magnitude loading of each factor positive
    pivots = np.argmax(np.abs(loadings), axis=0)
    loadings *= np.sign(loadings[pivots, np.arange(n_factors)])
    return FactorModel(n_factors=n_factors, loadings=loadings, means=means, scales=scales, singular_values=s)


def pc_regression_density(model: FactorModel, X_window: np.ndarray, y_window: np.ndarray, x_new: np.ndarray,
                          disc: DiscountConfig, n0: float = 10.0, s0: float = 0.01,
                          steps: int = 1) -> StudentTDensity:
    """DLM on (1, factor scores) filtered over the window, then a `steps`-ahead density at x_new"""
    F = np.column_stack([np.ones(len(X_window)), model.scores(X_window)])
    post = DLMPosterior.initial(F.shape[1], n0=n0, s0=s0)
    for i in range(len(F)):
        post, _, _ = filter_step(post, F[i], y_window[i], disc)
    f_new = np.concatenate([[1.0], model.scores(np.atleast_2d(x_new))[0]])
    return forecast_density(post, f_new, disc, steps=steps)


def pca_forecast(X_window: np.ndarray, y_window: np.ndarray, x_new: np.ndarray, n_factors: int,
                 disc: DiscountConfig, n0: float = 10.0, s0: float = 0.01, steps: int = 1) -> StudentTDensity:
    n_factors = min(n_factors, X_window.shape[1], X_window.shape[0])
    model = pca_decompose(X_window, n_factors)
    return pc_regression_density(model, X_window, y_window, x_new, disc, n0=n0, s0=s0, steps=steps)

