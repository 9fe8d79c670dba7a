"""
DRSYNTH - Forecast Evaluation
Point and density scores (RMSFE, cumulative log predictive density ratios) and
MC-empirical R^2 dependency diagnostics on retrospective latent agent states
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence

import numpy as np
import pandas as pd

from errors import DataValidationError, NumericalError

logger = logging.getLogger(__name__)

MIN_R2_DRAWS = 10


class Predictive(Protocol):
    def mean(self) -> float: ...

    def logpdf(self, y: float): ...


@dataclass(frozen=True)
class ForecastRecord:
    date: pd.Period
    model: str
    horizon: int
    point: float
    realized: float
    log_density: float

    @property
    def squared_error(self) -> float:
        return (self.realized - self.point) ** 2


def make_record(date: pd.Period, model: str, horizon: int, predictive: Predictive, realized: float) -> ForecastRecord:
    """Score one predictive at its realized outcome; the point forecast is the predictive mean"""
    log_density = float(predictive.logpdf(realized))
    if not np.isfinite(log_density):
        raise NumericalError(f"non-finite log predictive density for '{model}' (h={horizon})", date=str(date))
    return ForecastRecord(date=date, model=model, horizon=horizon, point=float(predictive.mean()),
                          realized=float(realized), log_density=log_density)


def rmsfe(records: Sequence[ForecastRecord]) -> float:
    if len(records) == 0:
        raise DataValidationError("RMSFE of an empty evaluation window")
    return float(np.sqrt(np.mean([r.squared_error for r in records])))


def relative_rmsfe(model_rmsfe: float, reference_rmsfe: float) -> float:
    """(RMSE_ref - RMSE_model) / RMSE_model, in percent"""
    if model_rmsfe == 0.0:
        return 0.0 if reference_rmsfe == 0.0 else float("inf")
    return 100.0 * (reference_rmsfe - model_rmsfe) / model_rmsfe


def lpdr_series(records: Sequence[ForecastRecord], reference: Sequence[ForecastRecord]) -> pd.Series:
    """Running sum of log p_model(y) - log p_reference(y) over the evaluation dates"""
    if len(records) != len(reference):
        raise DataValidationError(f"LPDR needs aligned records ({len(records)} vs {len(reference)})")
    for a, b in zip(records, reference):
        if a.date != b.date or a.horizon != b.horizon:
            raise DataValidationError(
                f"LPDR records misaligned: {a.model}@{a.date}/h{a.horizon} vs {b.model}@{b.date}/h{b.horizon}"
            )
    diffs = np.array([a.log_density - b.log_density for a, b in zip(records, reference)])
    index = pd.PeriodIndex([r.date for r in records], freq="M", name="date")
    return pd.Series(np.cumsum(diffs), index=index, name="lpdr")


def metrics_table(records_by_model: Dict[str, List[ForecastRecord]], reference: str, horizon: int) -> pd.DataFrame:
    """One row per model: rmsfe, relative rmsfe against the reference, final LPDR"""
    if reference not in records_by_model:
        raise DataValidationError(f"reference model '{reference}' has no forecasts at horizon {horizon}")
    ref_records = records_by_model[reference]
    ref_rmsfe = rmsfe(ref_records)

    rows = []
    for model, records in records_by_model.items():
        value = rmsfe(records)
        rows.append({
            "model": model,
            "horizon": horizon,
            "rmsfe": value,
            "rmsfe_pct_vs_reference": relative_rmsfe(value, ref_rmsfe),
            "lpdr_final": float(lpdr_series(records, ref_records).iloc[-1]),
        })
    return pd.DataFrame(rows, columns=["model", "horizon", "rmsfe", "rmsfe_pct_vs_reference", "lpdr_final"])


def metrics_preamble(reference: str) -> List[str]:
    """Column conventions written above the metrics table"""
    return [
        f"reference model: {reference}",
        "rmsfe_pct_vs_reference = 100 * (rmsfe_reference - rmsfe_model) / rmsfe_model; positive when the model beats the reference",
        "lpdr_final = sum over evaluation dates of log p_model(y) - log p_reference(y)",
    ]


def _check_draws(x: np.ndarray) -> None:
    if x.ndim != 3:
        raise DataValidationError(f"latent-state draws must be (S, T, J), got shape {x.shape}")
    if x.shape[2] < 2:
        raise DataValidationError("MC-empirical R^2 needs at least 2 groups")
    if x.shape[0] < MIN_R2_DRAWS:
        raise DataValidationError(f"MC-empirical R^2 needs at least {MIN_R2_DRAWS} draws, got {x.shape[0]}")


def mc_r2_full(x: np.ndarray, j: int) -> np.ndarray:
    """Per-period R^2 of group j's latent draws regressed (with intercept) on all other groups'"""
    _check_draws(x)
    S, T, J = x.shape
    others = [q for q in range(J) if q != j]
    r2 = np.zeros(T)
    degenerate = 0
    for t in range(T):
        target = x[:, t, j] - x[:, t, j].mean()
        sst = float(target @ target)
        if sst <= 0.0:
            degenerate += 1
            continue
        design = x[:, t, others] - x[:, t, others].mean(axis=0)
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        resid = target - design @ coef
        r2[t] = 1.0 - float(resid @ resid) / sst
    if degenerate:
        logger.warning(f"⚠️ Group {j}: zero-variance latent draws at {degenerate} periods, R^2 set to 0")
    return np.clip(r2, 0.0, 1.0)


def mc_r2_pairwise(x: np.ndarray, j: int, q: int) -> np.ndarray:
    """Per-period R^2 of one group's latent draws on another's (squared correlation)"""
    _check_draws(x)
    a = x[:, :, j] - x[:, :, j].mean(axis=0)
    b = x[:, :, q] - x[:, :, q].mean(axis=0)
    cov = np.sum(a * b, axis=0)
    var_prod = np.sum(a * a, axis=0) * np.sum(b * b, axis=0)
    positive = var_prod > 0.0
    if not positive.all():
        logger.warning(f"⚠️ Groups {j},{q}: zero-variance latent draws at {int((~positive).sum())} periods")
    r2 = np.where(positive, cov * cov / np.where(positive, var_prod, 1.0), 0.0)
    return np.clip(r2, 0.0, 1.0)
