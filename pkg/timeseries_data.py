"""
DRSYNTH - Time Series Panel Data
Loads and validates monthly panels, partitions predictors into groups and builds
horizon-aligned (lag-k) regression designs
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from errors import DataValidationError

logger = logging.getLogger(__name__)

MONTH_PATTERN = re.compile(r"^\d{4}-(0[1-9]|1[0-2])$")
IGNORE_KEY = "ignore"
# Header occupies line 1 of the file
FIRST_DATA_LINE = 2


@dataclass(frozen=True)
class PanelSchema:
    """Column declaration for an input panel"""
    target: str
    date_column: str = "date"
    predictors: Optional[Sequence[str]] = None
    risk_free: Optional[str] = None


@dataclass(frozen=True)
class TimeSeriesPanel:
    """Balanced monthly panel: one target series plus named predictor columns"""
    dates: pd.PeriodIndex
    target_name: str
    target: np.ndarray
    predictors: pd.DataFrame
    risk_free: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.dates)
        if len(self.target) != n or len(self.predictors) != n:
            raise DataValidationError("panel columns have mismatched lengths")
        if self.risk_free is not None and len(self.risk_free) != n:
            raise DataValidationError("risk-free column has mismatched length")
        if self.predictors.columns.has_duplicates:
            raise DataValidationError("duplicate predictor names")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def predictor_names(self) -> List[str]:
        return list(self.predictors.columns)

    def position(self, date: str) -> int:
        """Row index of a YYYY-MM stamp"""
        period = pd.Period(date, freq="M")
        matches = np.flatnonzero(self.dates == period)
        if len(matches) == 0:
            raise DataValidationError(f"date {date} not present in panel ({self.dates[0]}..{self.dates[-1]})")
        return int(matches[0])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({self.target_name: self.target}, index=self.dates)
        if self.risk_free is not None:
            frame["risk_free"] = self.risk_free
        frame = pd.concat([frame, self.predictors.set_axis(self.dates)], axis=1)
        frame.index.name = "date"
        return frame


@dataclass(frozen=True)
class GroupPartition:
    """Ordered, disjoint assignment of predictors to J groups"""
    groups: Tuple[Tuple[str, Tuple[str, ...]], ...]

    @property
    def J(self) -> int:
        return len(self.groups)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.groups]

    def members(self, name: str) -> List[str]:
        for group, columns in self.groups:
            if group == name:
                return list(columns)
        raise KeyError(name)

    def all_predictors(self) -> List[str]:
        return [column for _, columns in self.groups for column in columns]


@dataclass(frozen=True)
class SupervisedSlice:
    """Lag-k design: row i pairs y at dates[i] with predictors dated k months earlier"""
    horizon: int
    dates: pd.PeriodIndex
    y: np.ndarray
    X: np.ndarray
    columns: Tuple[str, ...]
    intercept: bool

    def __len__(self) -> int:
        return len(self.y)


def _parse_column(raw: pd.Series, column: str) -> np.ndarray:
    """Convert one text column to float64, naming the first offending cell"""
    values = np.empty(len(raw), dtype=np.float64)
    for i, cell in enumerate(raw):
        text = cell.strip()
        if text == "" or text.lower() in {"na", "nan", "null"}:
            raise DataValidationError("missing value", row=i + FIRST_DATA_LINE, column=column)
        try:
            values[i] = float(text)
        except ValueError:
            raise DataValidationError(f"unparseable cell '{text}'", row=i + FIRST_DATA_LINE, column=column)
        if not np.isfinite(values[i]):
            raise DataValidationError(f"non-finite cell '{text}'", row=i + FIRST_DATA_LINE, column=column)
    return values


def _parse_dates(raw: pd.Series, column: str) -> pd.PeriodIndex:
    periods = []
    for i, cell in enumerate(raw):
        text = cell.strip()
        if not MONTH_PATTERN.match(text):
            raise DataValidationError(f"date '{text}' is not YYYY-MM", row=i + FIRST_DATA_LINE, column=column)
        periods.append(pd.Period(text, freq="M"))

    dates = pd.PeriodIndex(periods, freq="M")
    for i in range(1, len(dates)):
        step = (dates[i] - dates[i - 1]).n
        if step == 0:
            raise DataValidationError(f"duplicate date {dates[i]}", row=i + FIRST_DATA_LINE, column=column)
        if step < 0:
            raise DataValidationError(f"dates not increasing at {dates[i]}", row=i + FIRST_DATA_LINE, column=column)
        if step > 1:
            raise DataValidationError(
                f"gap in dates between {dates[i - 1]} and {dates[i]}", row=i + FIRST_DATA_LINE, column=column
            )
    return dates


def load_panel(path: Path, schema: PanelSchema) -> TimeSeriesPanel:
    """Load a CSV panel (first column `date`, numeric columns) and validate it"""
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"panel file not found: {path}")

    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if schema.date_column not in raw.columns:
        raise DataValidationError(f"date column '{schema.date_column}' missing from {path.name}")
    if raw.columns.has_duplicates:
        raise DataValidationError(f"duplicate column names in {path.name}")
    if len(raw) == 0:
        raise DataValidationError(f"panel {path.name} has no rows")

    reserved = {schema.date_column, schema.target}
    if schema.risk_free:
        reserved.add(schema.risk_free)
    if schema.predictors is None:
        predictor_names = [c for c in raw.columns if c not in reserved]
    else:
        predictor_names = list(schema.predictors)

    for column in [schema.target, *predictor_names] + ([schema.risk_free] if schema.risk_free else []):
        if column not in raw.columns:
            raise DataValidationError(f"declared column missing from {path.name}", column=column)

    dates = _parse_dates(raw[schema.date_column], schema.date_column)
    target = _parse_column(raw[schema.target], schema.target)
    predictors = pd.DataFrame(
        {name: _parse_column(raw[name], name) for name in predictor_names},
        index=pd.RangeIndex(len(raw)),
    )
    risk_free = _parse_column(raw[schema.risk_free], schema.risk_free) if schema.risk_free else None

    panel = TimeSeriesPanel(
        dates=dates, target_name=schema.target, target=target, predictors=predictors, risk_free=risk_free
    )
    logger.info(f"✅ Panel loaded: {path.name} ({len(panel)} months, {len(predictor_names)} predictors, "
                f"{dates[0]}..{dates[-1]})")
    return panel


def write_panel(panel: TimeSeriesPanel, path: Path, risk_free_name: str = "risk_free") -> None:
    """Write a panel so that load_panel reproduces it bit-for-bit"""
    frame = panel.to_frame()
    if panel.risk_free is not None and risk_free_name != "risk_free":
        frame = frame.rename(columns={"risk_free": risk_free_name})
    frame.index = frame.index.strftime("%Y-%m")
    # repr gives the shortest round-tripping decimal string
    frame.to_csv(path, index_label="date", float_format=None, encoding="utf-8")


def load_group_mapping(path: Path) -> Dict[str, object]:
    """Read `group_name: [column, ...]` entries, preserving file order"""
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"group mapping file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            mapping = yaml.safe_load(handle)
        except yaml.YAMLError as e:
            raise DataValidationError(f"cannot parse group mapping {path.name}: {e}")
    if not isinstance(mapping, dict) or not mapping:
        raise DataValidationError(f"group mapping {path.name} must be a non-empty `name: [columns]` map")
    return mapping


def partition_groups(panel: TimeSeriesPanel, mapping: Dict[str, object]) -> GroupPartition:
    """Validate a group mapping against the panel and freeze it into a partition

    An `ignore` entry lists predictors deliberately left out; `ignore: "*"` drops
    every predictor not assigned to a group.
    """
    available = set(panel.predictor_names)
    seen: Dict[str, str] = {}
    groups = []
    ignored: List[str] = []
    ignore_rest = False

    for name, columns in mapping.items():
        name = str(name)
        if name == IGNORE_KEY:
            if columns == "*":
                ignore_rest = True
                continue
            columns = columns or []
        if not isinstance(columns, list):
            raise DataValidationError(f"group '{name}' must map to a list of predictor names")
        for column in columns:
            column = str(column)
            if column not in available:
                raise DataValidationError(f"unknown predictor '{column}' in group '{name}'")
            if column in seen:
                raise DataValidationError(
                    f"predictor '{column}' mapped twice (groups '{seen[column]}' and '{name}')"
                )
            seen[column] = name
        if name == IGNORE_KEY:
            ignored.extend(str(c) for c in columns)
            continue
        if not columns:
            raise DataValidationError(f"group '{name}' is empty")
        groups.append((name, tuple(str(c) for c in columns)))

    if not groups:
        raise DataValidationError("group mapping defines no groups")

    unmapped = [c for c in panel.predictor_names if c not in seen]
    if unmapped and not ignore_rest:
        raise DataValidationError(
            f"predictors not assigned to any group: {unmapped} (list them under '{IGNORE_KEY}' to drop them)"
        )

    partition = GroupPartition(groups=tuple(groups))
    logger.info(f"📊 Partitioned {len(partition.all_predictors())} predictors into J={partition.J} groups"
                + (f", ignoring {len(ignored) + len(unmapped)}" if ignored or unmapped else ""))
    return partition


def _expanding_zscore(frame: pd.DataFrame) -> pd.DataFrame:
    """Standardize each row with the mean/sd of rows up to and including it"""
    mean = frame.expanding().mean()
    sd = frame.expanding().std(ddof=0)
    sd = sd.where(sd > 0.0, 1.0).fillna(1.0)
    return (frame - mean) / sd


def build_supervised(
    panel: TimeSeriesPanel,
    partition: GroupPartition,
    k: int,
    intercept: bool = True,
    standardize: bool = False,
    min_train: int = 1,
) -> Dict[str, SupervisedSlice]:
    """Build one lag-k design per group: y_t regressed on that group's x_{t-k}"""
    if k < 1:
        raise DataValidationError(f"horizon must be >= 1, got {k}")
    if len(panel) < k + 2 or len(panel) <= k + min_train:
        raise DataValidationError(f"panel of {len(panel)} rows too short for horizon {k}")

    predictors = panel.predictors
    if standardize:
        predictors = _expanding_zscore(predictors)

    dates = panel.dates[k:]
    y = panel.target[k:]
    slices = {}
    for name, columns in partition.groups:
        block = predictors[list(columns)].to_numpy(dtype=np.float64)
        X = block[:-k]
        names = tuple(columns)
        if intercept:
            X = np.column_stack([np.ones(len(X)), X])
            names = ("intercept",) + names
        slices[name] = SupervisedSlice(
            horizon=k, dates=dates, y=y.copy(), X=X, columns=names, intercept=intercept
        )
    return slices


def full_partition(partition: GroupPartition, name: str = "full") -> GroupPartition:
    """Single group holding every mapped predictor (the unpartitioned regression)"""
    return GroupPartition(groups=((name, tuple(partition.all_predictors())),))
