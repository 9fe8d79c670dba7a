#!/usr/bin/env python3
"""
Tests for panel loading, group partitions and lag-k designs
"""

import numpy as np
import pandas as pd
import pytest

from errors import DataValidationError
from timeseries_data import (
    PanelSchema,
    TimeSeriesPanel,
    build_supervised,
    full_partition,
    load_group_mapping,
    load_panel,
    partition_groups,
    write_panel,
)


def _write(tmp_path, text, name="panel.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _ramp_panel(T=10, predictors=("a", "b")):
    dates = pd.period_range("2001-01", periods=T, freq="M")
    X = pd.DataFrame({name: np.arange(T, dtype=float) + 100 * i for i, name in enumerate(predictors)})
    return TimeSeriesPanel(dates=dates, target_name="y", target=np.arange(T, dtype=float) * 0.5, predictors=X)


def test_load_three_row_panel(tmp_path):
    """Direct parse of a small well-formed panel"""
    path = _write(tmp_path, "date,y,x1,x2\n2001-01,1.0,2.0,3.0\n2001-02,1.5,2.5,3.5\n2001-03,2.0,3.0,4.0\n")
    panel = load_panel(path, PanelSchema(target="y"))
    assert len(panel) == 3
    assert panel.predictor_names == ["x1", "x2"]
    assert panel.target.tolist() == [1.0, 1.5, 2.0]
    assert str(panel.dates[0]) == "2001-01"


def test_missing_cell_names_row_and_column(tmp_path):
    path = _write(tmp_path, "date,y,x1\n2001-01,1.0,2.0\n2001-02,,2.5\n")
    with pytest.raises(DataValidationError) as info:
        load_panel(path, PanelSchema(target="y"))
    assert info.value.row == 3
    assert info.value.column == "y"


def test_unparseable_cell(tmp_path):
    path = _write(tmp_path, "date,y,x1\n2001-01,1.0,abc\n")
    with pytest.raises(DataValidationError, match="unparseable"):
        load_panel(path, PanelSchema(target="y"))


def test_gap_in_dates(tmp_path):
    path = _write(tmp_path, "date,y,x1\n2001-01,1.0,2.0\n2001-03,1.5,2.5\n")
    with pytest.raises(DataValidationError, match="gap"):
        load_panel(path, PanelSchema(target="y"))


def test_duplicate_date(tmp_path):
    path = _write(tmp_path, "date,y,x1\n2001-01,1.0,2.0\n2001-01,1.5,2.5\n")
    with pytest.raises(DataValidationError, match="duplicate"):
        load_panel(path, PanelSchema(target="y"))


def test_missing_file(tmp_path):
    with pytest.raises(DataValidationError, match="not found"):
        load_panel(tmp_path / "nope.csv", PanelSchema(target="y"))


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    T = 24
    panel = TimeSeriesPanel(
        dates=pd.period_range("1999-11", periods=T, freq="M"),
        target_name="ret",
        target=rng.standard_normal(T) * 1e-3,
        predictors=pd.DataFrame({"p1": rng.standard_normal(T), "p2": rng.standard_normal(T) * 1e5}),
        risk_free=np.abs(rng.standard_normal(T)) * 1e-3,
    )
    path = tmp_path / "round.csv"
    write_panel(panel, path, risk_free_name="rf")
    again = load_panel(path, PanelSchema(target="ret", risk_free="rf"))

    assert again.dates.equals(panel.dates)
    assert np.array_equal(again.target, panel.target)
    assert np.array_equal(again.risk_free, panel.risk_free)
    assert np.array_equal(again.predictors.to_numpy(), panel.predictors.to_numpy())


def test_partition_two_groups():
    panel = _ramp_panel(predictors=("a", "b", "c", "d"))
    partition = partition_groups(panel, {"g1": ["a", "b"], "g2": ["c", "d"]})
    assert partition.J == 2
    assert partition.names == ["g1", "g2"]
    assert sorted(partition.all_predictors()) == ["a", "b", "c", "d"]


def test_partition_rejects_duplicates_and_unknowns():
    panel = _ramp_panel(predictors=("a", "b", "c"))
    with pytest.raises(DataValidationError, match="mapped twice"):
        partition_groups(panel, {"g1": ["a", "b"], "g2": ["b", "c"]})
    with pytest.raises(DataValidationError, match="unknown predictor"):
        partition_groups(panel, {"g1": ["a", "zzz"]})
    with pytest.raises(DataValidationError, match="empty"):
        partition_groups(panel, {"g1": ["a", "b", "c"], "g2": []})


def test_partition_unmapped_needs_ignore_marker():
    panel = _ramp_panel(predictors=("a", "b", "c"))
    with pytest.raises(DataValidationError, match="not assigned"):
        partition_groups(panel, {"g1": ["a", "b"]})
    assert partition_groups(panel, {"g1": ["a", "b"], "ignore": ["c"]}).J == 1
    assert partition_groups(panel, {"g1": ["a"], "ignore": "*"}).all_predictors() == ["a"]


def test_eight_macro_groups(tmp_path):
    names = ["output", "labor", "housing", "consumption", "money", "rates", "prices", "stocks"]
    columns = [f"{g}_{i}" for g in names for i in range(2)]
    panel = _ramp_panel(predictors=columns)
    mapping_file = _write(tmp_path, "\n".join(f"{g}: [{g}_0, {g}_1]" for g in names), "groups.yaml")
    partition = partition_groups(panel, load_group_mapping(mapping_file))
    assert partition.J == 8
    assert partition.names == names


@pytest.mark.parametrize("k, rows", [(1, 9), (3, 7)])
def test_supervised_length(k, rows):
    panel = _ramp_panel(T=10)
    partition = partition_groups(panel, {"g": ["a", "b"]})
    slice_ = build_supervised(panel, partition, k)["g"]
    assert len(slice_) == rows
    assert slice_.X.shape == (rows, 3)


def test_supervised_lag_definition():
    """Row for the date with x = 5 carries the predictor value dated one month earlier"""
    panel = _ramp_panel(T=10)
    partition = partition_groups(panel, {"g": ["a"], "ignore": ["b"]})
    slice_ = build_supervised(panel, partition, 1, intercept=False)["g"]
    row = int(np.flatnonzero(slice_.dates == panel.dates[5])[0])
    assert slice_.X[row, 0] == 4.0
    assert slice_.y[row] == panel.target[5]


def test_supervised_shift_reproduces_predictor():
    panel = _ramp_panel(T=15)
    partition = partition_groups(panel, {"g": ["a", "b"]})
    for k in (1, 2, 4):
        slice_ = build_supervised(panel, partition, k, intercept=False)["g"]
        assert np.array_equal(slice_.X[:, 1], panel.predictors["b"].to_numpy()[:-k])


def test_supervised_too_short():
    panel = _ramp_panel(T=4)
    partition = partition_groups(panel, {"g": ["a", "b"]})
    with pytest.raises(DataValidationError, match="too short"):
        build_supervised(panel, partition, 3)


def test_full_partition_concatenates_groups():
    panel = _ramp_panel(predictors=("a", "b", "c"))
    partition = partition_groups(panel, {"g1": ["c"], "g2": ["a", "b"]})
    full = full_partition(partition)
    assert full.J == 1
    assert full.members("full") == ["c", "a", "b"]
