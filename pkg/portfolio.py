"""
DRSYNTH - Portfolio Evaluation
Single risky asset plus risk-free bond under power utility. The target is a log
excess return, so next-period wealth for weight w is

    W = (1 - w) exp(r_f) + w exp(r_f + y)

Weights are chosen on a grid to maximize the Monte-Carlo expected utility over
predictive draws; models are compared by certainty equivalent returns (CER).
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from errors import PortfolioError

logger = logging.getLogger(__name__)

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class AllocationConfig:
    gamma: float = 5.0
    lower: float = -1.0
    upper: float = 2.0
    step: float = 0.01

    def __post_init__(self):
        if not self.gamma > 0.0 or self.gamma == 1.0:
            raise PortfolioError(f"risk aversion must be positive and != 1, got {self.gamma}")
        if not self.lower < self.upper:
            raise PortfolioError(f"weight bounds must satisfy lower < upper, got [{self.lower}, {self.upper}]")
        if not self.step > 0.0:
            raise PortfolioError(f"grid step must be positive, got {self.step}")
        span = (self.upper - self.lower) / self.step
        if abs(span - round(span)) > 1e-6:
            raise PortfolioError(f"grid step {self.step} does not divide [{self.lower}, {self.upper}]")

    def grid(self) -> np.ndarray:
        n = int(round((self.upper - self.lower) / self.step))
        return np.linspace(self.lower, self.upper, n + 1)


@dataclass(frozen=True)
class WealthPath:
    dates: pd.PeriodIndex
    weights: np.ndarray
    wealth: np.ndarray
    utility: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"weight": self.weights, "realized_wealth": self.wealth, "realized_utility": self.utility},
            index=pd.PeriodIndex(self.dates, name="date"),
        )


def power_utility(wealth, gamma: float):
    return np.power(wealth, 1.0 - gamma) / (1.0 - gamma)


def gross_wealth(weight, y, risk_free):
    return (1.0 - weight) * np.exp(risk_free) + weight * np.exp(risk_free + y)


def expected_utility(draws: np.ndarray, risk_free: float, weights: np.ndarray, gamma: float) -> np.ndarray:
    """Monte-Carlo expected utility per candidate weight; NaN where some draw wipes out wealth"""
    W = gross_wealth(weights[:, None], np.asarray(draws, dtype=np.float64)[None, :], risk_free)
    feasible = np.all(W > 0.0, axis=1)
    eu = np.full(len(weights), np.nan)
    eu[feasible] = power_utility(W[feasible], gamma).mean(axis=1)
    return eu


def optimal_weight(draws: Sequence[float], risk_free: float, cfg: AllocationConfig) -> float:
    """Grid argmax of expected utility; near-ties go to the smallest |w|"""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.size == 0:
        raise PortfolioError("optimal weight needs at least one predictive draw")

    grid = cfg.grid()
    eu = expected_utility(draws, risk_free, grid, cfg.gamma)
    feasible = ~np.isnan(eu)
    if not feasible.any():
        raise PortfolioError(
            f"every weight in [{cfg.lower}, {cfg.upper}] gives non-positive wealth for some draw; tighten the bounds"
        )
    best = np.nanmax(eu)
    tied = feasible & (eu >= best - TIE_RTOL * abs(best))
    candidates = grid[tied]
    return float(candidates[np.argmin(np.abs(candidates))])


def realized_utility_series(dates: pd.PeriodIndex, weights: Sequence[float], y: Sequence[float],
                            risk_free: Sequence[float], gamma: float) -> WealthPath:
    weights = np.asarray(weights, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    risk_free = np.asarray(risk_free, dtype=np.float64)
    if not (len(dates) == len(weights) == len(y) == len(risk_free)):
        raise PortfolioError("weights, returns and risk-free rates must be aligned")

    wealth = gross_wealth(weights, y, risk_free)
    bad = np.flatnonzero(wealth <= 0.0)
    if len(bad):
        i = int(bad[0])
        raise PortfolioError(f"non-positive realized wealth {wealth[i]:.4g} at {dates[i]} (weight {weights[i]})")
    return WealthPath(dates=dates, weights=weights, wealth=wealth, utility=power_utility(wealth, gamma))


def cer_aggregate(path: WealthPath, reference: WealthPath, gamma: float) -> float:
    """[sum U_model / sum U_reference]^(1/(1-gamma)) - 1"""
    if len(path.utility) != len(reference.utility):
        raise PortfolioError("CER needs wealth paths of equal length")
    total = float(np.sum(path.utility))
    total_ref = float(np.sum(reference.utility))
    if total == 0.0 or total_ref == 0.0 or np.sign(total) != np.sign(total_ref):
        raise PortfolioError(f"utility sums {total:.4g} and {total_ref:.4g} are zero or of opposite sign")
    return float((total / total_ref) ** (1.0 / (1.0 - gamma)) - 1.0)


def cer_single_period(utility: Sequence[float], utility_ref: Sequence[float], gamma: float) -> np.ndarray:
    utility = np.asarray(utility, dtype=np.float64)
    utility_ref = np.asarray(utility_ref, dtype=np.float64)
    if np.any(utility == 0.0) or np.any(utility_ref == 0.0) or np.any(np.sign(utility) != np.sign(utility_ref)):
        raise PortfolioError("single-period utilities must be nonzero and share a sign")
    return (utility / utility_ref) ** (1.0 / (1.0 - gamma)) - 1.0


def ccer_series(cer: Sequence[float], dates: pd.PeriodIndex) -> pd.Series:
    """Cumulative sum of log(1 + CER_t)"""
    cer = np.asarray(cer, dtype=np.float64)
    bad = np.flatnonzero(cer <= -1.0)
    if len(bad):
        raise PortfolioError(f"single-period CER {cer[bad[0]]:.4g} <= -1 at {dates[bad[0]]}")
    return pd.Series(np.cumsum(np.log1p(cer)), index=pd.PeriodIndex(dates, name="date"), name="ccer")


def annualize(cer, periods_per_year: int = 12):
    return np.asarray(cer, dtype=np.float64) * periods_per_year
