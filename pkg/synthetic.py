"""
DRSYNTH - Synthetic Panels
Generators behind `synth-data`: small panels with known structure for smoke
runs, recovery studies and the qualitative model-ordering checks.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from errors import ConfigError, ReportWriteError
from timeseries_data import TimeSeriesPanel, write_panel

logger = logging.getLogger(__name__)

START_MONTH = "1990-01"
MACRO_GROUPS = ["output", "labor", "housing", "consumption", "money", "rates", "prices", "stocks"]
# month index where half of the macro loadings reverse sign (inside the scored window)
MACRO_BREAK = 120


@dataclass(frozen=True)
class SyntheticPanel:
    panel: TimeSeriesPanel
    groups: Dict[str, List[str]]
    # (train_end, calibration_end, evaluation_end) suited to the panel length
    splits: Tuple[str, str, str]
    risk_free_name: str = "risk_free"
    # [synthesis] overrides written into the generated experiment file
    synthesis: Dict[str, Union[float, List[float]]] = field(default_factory=dict)


def _dates(T: int) -> pd.PeriodIndex:
    return pd.period_range(START_MONTH, periods=T, freq="M")


def _ar1(rng: np.random.Generator, T: int, phi: float, size: int = 1) -> np.ndarray:
    """Stationary AR(1) paths with unit marginal variance, shape (T, size)"""
    out = np.empty((T, size))
    out[0] = rng.standard_normal(size)
    scale = np.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        out[t] = phi * out[t - 1] + scale * rng.standard_normal(size)
    return out


def _default_splits(dates: pd.PeriodIndex, train: float = 0.4, calibration: float = 0.6) -> Tuple[str, str, str]:
    T = len(dates)
    return (str(dates[int(T * train) - 1]), str(dates[int(T * calibration) - 1]), str(dates[-1]))


def _grouped_signal_panel(rng: np.random.Generator, T: int, names: List[str], per_group: int,
                          coefficients: np.ndarray, noise: float, common: float,
                          offsets: Optional[np.ndarray] = None) -> Tuple[np.ndarray, pd.DataFrame, Dict]:
    """Correlated group signals; y_t loads on every group's lagged signal, so no group is the whole truth

    `coefficients` is one loading per group or a (T, J) path of loadings;
    `offsets` shifts the level of every predictor in a group.
    """
    J = len(names)
    coefficients = np.broadcast_to(np.asarray(coefficients, dtype=np.float64), (T, J))
    offsets = np.zeros(J) if offsets is None else np.asarray(offsets, dtype=np.float64)
    factor = _ar1(rng, T, 0.8)[:, 0]
    idio = _ar1(rng, T, 0.5, size=J)
    signals = common * factor[:, None] + np.sqrt(1.0 - common ** 2) * idio

    columns, groups = {}, {}
    for j, name in enumerate(names):
        members = []
        for i in range(per_group):
            column = f"{name}_{i + 1}"
            loading = 1.0 if i == 0 else rng.uniform(0.5, 1.0)
            columns[column] = offsets[j] + loading * signals[:, j] + 0.5 * rng.standard_normal(T)
            members.append(column)
        groups[name] = members

    y = np.empty(T)
    y[0] = noise * rng.standard_normal()
    y[1:] = np.sum(signals[:-1] * coefficients[1:], axis=1) + noise * rng.standard_normal(T - 1)
    return y, pd.DataFrame(columns), groups


def tiny(rng: np.random.Generator) -> SyntheticPanel:
    T = 120
    names = ["alpha", "beta", "gamma"]
    y, X, groups = _grouped_signal_panel(rng, T, names, 2, np.array([0.5, 0.3, -0.2]), noise=0.3, common=0.4)
    dates = _dates(T)
    panel = TimeSeriesPanel(dates=dates, target_name="y", target=y, predictors=X)
    return SyntheticPanel(panel=panel, groups=groups, splits=_default_splits(dates, 0.5, 0.75))


def macro(rng: np.random.Generator) -> SyntheticPanel:
    T = 240
    before = np.array([0.35, 0.25, -0.15, 0.2, 0.1, -0.25, 0.3, 0.15])
    after = before * np.array([-1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0, 1.0])
    coefficients = np.where(np.arange(T)[:, None] < MACRO_BREAK, before, after)
    offsets = rng.uniform(-1.0, 1.0, len(MACRO_GROUPS))
    y, X, groups = _grouped_signal_panel(rng, T, MACRO_GROUPS, 4, coefficients, noise=0.25, common=0.5,
                                         offsets=offsets)
    # inflation-like level; per-group predictor biases are absorbed by the agent intercepts
    y = 2.0 + y
    dates = _dates(T)
    panel = TimeSeriesPanel(dates=dates, target_name="inflation", target=y, predictors=X)
    return SyntheticPanel(panel=panel, groups=groups, splits=_default_splits(dates, 0.25, 0.375),
                          synthesis={"delta": 0.95})


def finance(rng: np.random.Generator) -> SyntheticPanel:
    T = 240
    names = ["valuation", "profitability", "capital", "liquidity", "efficiency", "solvency", "other", "macro"]
    coefficients = np.array([0.006, 0.004, -0.003, 0.002, 0.001, -0.002, 0.0, 0.004])
    y, X, groups = _grouped_signal_panel(rng, T, names, 4, coefficients, noise=0.04, common=0.3)
    # small predictable component of a monthly log excess return
    y = 0.005 + y
    risk_free = np.clip(0.002 + 0.001 * _ar1(rng, T, 0.95)[:, 0], 0.0, None)
    dates = _dates(T)
    panel = TimeSeriesPanel(dates=dates, target_name="excess_return", target=y, predictors=X, risk_free=risk_free)
    # return synthesis: faster state discount, slow volatility discount, weights centred on zero
    synthesis = {"delta": 0.95, "beta": 0.99, "n0": 12.0, "s0": 0.01, "m0": [0.0] * (len(names) + 1)}
    return SyntheticPanel(panel=panel, groups=groups, splits=_default_splits(dates, 0.25, 0.375),
                          synthesis=synthesis)


def _two_agent_panel(rng: np.random.Generator, weights: np.ndarray) -> SyntheticPanel:
    T = weights.shape[0]
    f = _ar1(rng, T, 0.7, size=2)
    y = np.empty(T)
    y[0] = 0.05 * rng.standard_normal()
    y[1:] = np.sum(weights[1:] * f[:-1], axis=1) + 0.05 * rng.standard_normal(T - 1)
    X = pd.DataFrame({"signal_a": f[:, 0], "signal_b": f[:, 1]})
    dates = _dates(T)
    panel = TimeSeriesPanel(dates=dates, target_name="y", target=y, predictors=X)
    return SyntheticPanel(panel=panel, groups={"a": ["signal_a"], "b": ["signal_b"]},
                          splits=_default_splits(dates, 0.2, 0.4))


def recovery(rng: np.random.Generator) -> SyntheticPanel:
    return _two_agent_panel(rng, np.tile([0.7, 0.3], (300, 1)))


def drift(rng: np.random.Generator) -> SyntheticPanel:
    w = np.linspace(0.8, 0.2, 300)
    return _two_agent_panel(rng, np.column_stack([w, 1.0 - w]))


PRESETS: Dict[str, Callable[[np.random.Generator], SyntheticPanel]] = {
    "tiny": tiny,
    "macro": macro,
    "finance": finance,
    "recovery": recovery,
    "drift": drift,
}


def generate_preset(name: str, seed: int = 0) -> SyntheticPanel:
    if name not in PRESETS:
        raise ConfigError(f"unknown synthetic preset '{name}'; choose from {sorted(PRESETS)}")
    return PRESETS[name](np.random.default_rng(seed))


def _toml_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(float(value))


def _experiment_toml(data: SyntheticPanel, panel_file: str, groups_file: str) -> str:
    train_end, calibration_end, evaluation_end = data.splits
    lines = [
        "[data]",
        f'panel_path = "{panel_file}"',
        f'groups_path = "{groups_file}"',
        f'target = "{data.panel.target_name}"',
    ]
    if data.panel.risk_free is not None:
        lines.append(f'risk_free = "{data.risk_free_name}"')
    lines += [
        "",
        "[splits]",
        f'train_end = "{train_end}"',
        f'calibration_end = "{calibration_end}"',
        f'evaluation_end = "{evaluation_end}"',
        "",
        "[mcmc]",
        "burn_in = 500",
        "n_saved = 1000",
        "origin_stride = 3",
        "",
    ]
    if data.synthesis:
        lines.append("[synthesis]")
        lines += [f"{key} = {_toml_value(value)}" for key, value in data.synthesis.items()]
        lines.append("")
    lines += [
        "[portfolio]",
        f"enabled = {'true' if data.panel.risk_free is not None else 'false'}",
        "",
    ]
    return "\n".join(lines)


def write_preset(name: str, out: Path, seed: int = 0) -> Dict[str, Path]:
    """Write <out> (panel CSV), <stem>_groups.yaml and <stem>_experiment.toml"""
    out = Path(out)
    data = generate_preset(name, seed)
    groups_path = out.with_name(f"{out.stem}_groups.yaml")
    config_path = out.with_name(f"{out.stem}_experiment.toml")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_panel(data.panel, out, risk_free_name=data.risk_free_name)
        with open(groups_path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(data.groups, handle, sort_keys=False)
        config_path.write_text(_experiment_toml(data, out.name, groups_path.name), encoding="utf-8")
    except OSError as e:
        raise ReportWriteError(f"cannot write synthetic preset '{name}' ({e})", str(out)) from e

    logger.info(f"✅ Synthetic '{name}' panel written: {out} ({len(data.panel)} months, "
                f"J={len(data.groups)}, seed={seed})")
    return {"panel": out, "groups": groups_path, "config": config_path}
