"""
DRSYNTH - Dynamic Linear Model Engine
Conjugate random-walk regression with state discount (delta) and beta-gamma
volatility discount (beta). Produces the sequential Student-t forecast densities
of every decoupled subgroup model and of the full-model baseline.

Discount convention: R_t = C_{t-1}/delta discounts the state, n_t = beta*n_{t-1} + 1
discounts the volatility.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from errors import DataValidationError, NumericalError
from timeseries_data import SupervisedSlice

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscountConfig:
    """Twin discount factors of one DLM component"""
    delta: float = 0.99
    beta: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"state discount delta must lie in (0, 1], got {self.delta}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"volatility discount beta must lie in (0, 1], got {self.beta}")


@dataclass(frozen=True)
class DLMPosterior:
    """Normal/inverse-gamma state: theta | v ~ N(m, C v/s), 1/v ~ G(n/2, n s/2)"""
    m: np.ndarray
    C: np.ndarray
    n: float
    s: float
    t: int = 0

    @classmethod
    def initial(cls, p: int, n0: float = 10.0, s0: float = 0.01,
                m0: Optional[np.ndarray] = None) -> "DLMPosterior":
        """Default prior: m0 = 0, C0 = I, i.e. theta | v ~ N(m0, (v/s0) I)"""
        m = np.zeros(p) if m0 is None else np.asarray(m0, dtype=np.float64).copy()
        if m.shape != (p,):
            raise DataValidationError(f"prior mean has shape {m.shape}, expected ({p},)")
        return cls(m=m, C=np.eye(p), n=float(n0), s=float(s0), t=0)

    @property
    def dim(self) -> int:
        return len(self.m)

    def check(self) -> None:
        if not (self.n > 0 and self.s > 0):
            raise NumericalError(f"invalid volatility state n={self.n}, s={self.s}", index=self.t)
        if not np.allclose(self.C, self.C.T, rtol=1e-10, atol=1e-14):
            raise NumericalError("posterior scale matrix lost symmetry", index=self.t)
        try:
            np.linalg.cholesky(self.C)
        except np.linalg.LinAlgError:
            raise NumericalError("posterior scale matrix lost positive definiteness", index=self.t) from None


@dataclass(frozen=True)
class StudentTDensity:
    """T_dof(location, scale) with scale the variance multiplier; scale == 0 is a point mass"""
    dof: float
    location: float
    scale: float

    def __post_init__(self):
        if not self.dof > 0:
            raise ValueError(f"degrees of freedom must be positive, got {self.dof}")
        if not self.scale >= 0:
            raise ValueError(f"scale must be non-negative, got {self.scale}")

    @property
    def is_point_mass(self) -> bool:
        return self.scale == 0.0

    def logpdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.is_point_mass:
            return np.where(y == self.location, 0.0, -np.inf)
        return stats.t.logpdf(y, df=self.dof, loc=self.location, scale=np.sqrt(self.scale))

    def mean(self) -> float:
        return float(self.location)

    def variance(self) -> float:
        if self.dof <= 2:
            return np.inf
        return float(self.scale * self.dof / (self.dof - 2.0))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.is_point_mass:
            return np.full(size, self.location)
        return self.location + np.sqrt(self.scale) * rng.standard_t(self.dof, size=size)


@dataclass(frozen=True)
class DensityPath:
    """Forecast densities of one model, one per target date"""
    name: str
    horizon: int
    dates: pd.PeriodIndex
    location: np.ndarray
    scale: np.ndarray
    dof: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)

    def __getitem__(self, i: int) -> StudentTDensity:
        return StudentTDensity(dof=float(self.dof[i]), location=float(self.location[i]),
                               scale=float(self.scale[i]))

    def index_of(self, date: pd.Period) -> int:
        matches = np.flatnonzero(self.dates == date)
        if len(matches) == 0:
            raise DataValidationError(f"no '{self.name}' density for {date}")
        return int(matches[0])

    def at(self, date: pd.Period) -> StudentTDensity:
        return self[self.index_of(date)]

    def window(self, start: pd.Period, end: pd.Period) -> "DensityPath":
        mask = (self.dates >= start) & (self.dates <= end)
        return replace(self, dates=self.dates[mask], location=self.location[mask],
                       scale=self.scale[mask], dof=self.dof[mask])


def forecast_density(post: DLMPosterior, F: np.ndarray, disc: DiscountConfig, steps: int = 1) -> StudentTDensity:
    """Predictive T_{beta n}(f, q) for a target `steps` periods past the posterior

    The random-walk evolution adds W = C(1/delta - 1) per step, so R = C(1 + steps(1/delta - 1));
    steps = 1 gives the usual R = C/delta.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.shape != post.m.shape:
        raise DataValidationError(f"regressor dimension {F.shape} does not match state dimension {post.m.shape}")
    R = post.C * (1.0 + steps * (1.0 / disc.delta - 1.0))
    f = float(F @ post.m)
    q = float(F @ R @ F + post.s)
    if not q > 0.0:
        raise NumericalError(f"non-positive predictive variance q={q:.3e}", index=post.t)
    return StudentTDensity(dof=disc.beta * post.n, location=f, scale=q)


def filter_step(post: DLMPosterior, F: np.ndarray, y: float,
                disc: DiscountConfig) -> Tuple[DLMPosterior, StudentTDensity, float]:
    """One forward-filtering update; returns (posterior at t, 1-step density, forecast error)"""
    F = np.asarray(F, dtype=np.float64)
    if F.shape != post.m.shape:
        raise DataValidationError(f"regressor dimension {F.shape} does not match state dimension {post.m.shape}")

    R = post.C / disc.delta
    RF = R @ F
    f = float(F @ post.m)
    q = float(F @ RF + post.s)
    if not q > 0.0:
        raise NumericalError(f"non-positive predictive variance q={q:.3e}", index=post.t + 1)
    density = StudentTDensity(dof=disc.beta * post.n, location=f, scale=q)

    e = float(y) - f
    A = RF / q
    n = disc.beta * post.n + 1.0
    r = (disc.beta * post.n + e * e / q) / n
    m = post.m + A * e
    C = r * (R - q * np.outer(A, A))
    C = 0.5 * (C + C.T)

    return DLMPosterior(m=m, C=C, n=n, s=r * post.s, t=post.t + 1), density, e


def run_expanding_filter(slice_: SupervisedSlice, prior: DLMPosterior,
                         disc: DiscountConfig) -> List[Tuple[StudentTDensity, DLMPosterior]]:
    """Filter every row of a design; density i is issued before y_i is observed"""
    if len(slice_) == 0:
        raise DataValidationError("cannot filter an empty design")

    path = []
    post = prior
    for i in range(len(slice_)):
        try:
            post, density, _ = filter_step(post, slice_.X[i], slice_.y[i], disc)
        except NumericalError as e:
            raise NumericalError(e.reason, date=str(slice_.dates[i])) from e
        path.append((density, post))
    return path


def agent_density_path(name: str, slice_: SupervisedSlice, prior: DLMPosterior,
                       disc: DiscountConfig) -> Tuple[DensityPath, List[DLMPosterior]]:
    """k-step densities for every target date of a lag-k design, free of look-ahead

    The density for row i uses the posterior after row i-k, i.e. only targets dated
    at or before the forecast origin. For k = 1 these are exactly the filter densities.
    """
    k = slice_.horizon
    filtered = run_expanding_filter(slice_, prior, disc)
    posteriors = [post for _, post in filtered]

    T = len(slice_)
    location = np.empty(T)
    scale = np.empty(T)
    dof = np.empty(T)
    for i in range(T):
        j = i - k
        if j >= 0:
            post, steps = posteriors[j], k
        else:
            post, steps = prior, i + 1
        try:
            density = forecast_density(post, slice_.X[i], disc, steps=steps)
        except NumericalError as e:
            raise NumericalError(f"agent '{name}' forecast failed", date=str(slice_.dates[i])) from e
        location[i], scale[i], dof[i] = density.location, density.scale, density.dof

    logger.debug(f"Agent '{name}' filtered over {T} rows (k={k})")
    return DensityPath(name=name, horizon=k, dates=slice_.dates, location=location,
                       scale=scale, dof=dof), posteriors


def _draw_precision_posterior(n: np.ndarray, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """v with 1/v ~ G(n/2, rate n s/2)"""
    return 1.0 / rng.gamma(shape=n / 2.0, scale=2.0 / (n * s))


def evolve_draws(theta: np.ndarray, v: np.ndarray, C: np.ndarray, n: np.ndarray, s: np.ndarray,
                 disc: DiscountConfig, rng: np.random.Generator, steps: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Propagate joint draws (theta_t, v_t) forward `steps` periods

    theta: (S, p), v: (S,), C: (S, p, p) filtered scales at t, n and s: (S,).
    v_{t+1} = v_t beta / gamma with gamma ~ Beta(beta n/2, (1-beta) n/2); then
    theta_{t+1} ~ N(theta_t, v_{t+1} W) with W = C(1/delta - 1)/s.
    beta = 1 and delta = 1 are the exact degenerate limits (no sampling).
    """
    theta = np.array(theta, dtype=np.float64, copy=True)
    v = np.array(v, dtype=np.float64, copy=True)
    n = np.array(n, dtype=np.float64, copy=True)
    S, p = theta.shape

    chol_W = None
    if disc.delta < 1.0:
        W = C * ((1.0 / disc.delta - 1.0) / s)[:, None, None]
        try:
            chol_W = np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            raise NumericalError("evolution covariance is not positive definite") from None

    for _ in range(steps):
        if disc.beta < 1.0:
            gamma = rng.beta(disc.beta * n / 2.0, (1.0 - disc.beta) * n / 2.0)
            v = v * disc.beta / gamma
            n = disc.beta * n
        if chol_W is not None:
            z = rng.standard_normal((S, p))
            theta = theta + np.sqrt(v)[:, None] * np.einsum("sij,sj->si", chol_W, z)
    return theta, v


def sample_evolution(post: DLMPosterior, disc: DiscountConfig, rng: np.random.Generator,
                     theta: Optional[np.ndarray] = None, v: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """Draw (theta_{t+1}, v_{t+1}) from the one-step evolution of a posterior

    When no current (theta, v) is supplied it is first drawn from the posterior itself.
    """
    if v is None:
        v = float(_draw_precision_posterior(np.array([post.n]), np.array([post.s]), rng)[0])
    if theta is None:
        theta = rng.multivariate_normal(post.m, post.C * (v / post.s), method="cholesky")
    theta_next, v_next = evolve_draws(
        np.asarray(theta, dtype=np.float64)[None, :], np.array([v]), post.C[None, :, :],
        np.array([post.n]), np.array([post.s]), disc, rng,
    )
    return theta_next[0], float(v_next[0])
