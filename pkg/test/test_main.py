#!/usr/bin/env python3
"""
End-to-end tests: synthetic preset -> experiment runner -> report files
"""

import json
import time

import numpy as np
import pandas as pd
import pytest

from config import RuntimeSettings, load_experiment_config
from main import DecoupleRecoupleRunner, main
from storage import INCOMPLETE_MARKER
from synthetic import write_preset

SMALL_RUN = {
    "mcmc.burn_in": 20,
    "mcmc.n_saved": 30,
    "mcmc.origin_stride": 3,
    "baselines.lasso_grid_size": 10,
    "baselines.pca_factors": 2,
}
TINY_GROUPS = ["alpha", "beta", "gamma"]


def _run(files, out, **extra):
    overrides = dict(SMALL_RUN, output_dir=out, **extra)
    cfg = load_experiment_config(files["config"], overrides)
    return DecoupleRecoupleRunner(cfg, runtime=RuntimeSettings(workers=1)).run_experiment()


@pytest.fixture(scope="module")
def tiny_files(tmp_path_factory):
    return write_preset("tiny", tmp_path_factory.mktemp("data") / "tiny.csv", seed=0)


@pytest.fixture(scope="module")
def tiny_run(tiny_files, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    metrics = _run(tiny_files, out)
    return out, metrics


def test_preset_files_written(tiny_files):
    assert tiny_files["panel"].exists()
    assert tiny_files["groups"].read_text(encoding="utf-8").startswith("alpha:")
    assert "[splits]" in tiny_files["config"].read_text(encoding="utf-8")


def test_report_manifest(tiny_run):
    out, _ = tiny_run
    expected = [
        "metrics.csv",
        "forecasts_h1.csv",
        "coefficients_h1.csv",
        "config_used.json",
        "lpdr/h1/DRS.csv",
        "lpdr/h1/LASSO.csv",
        "r2_full/alpha.csv",
        "r2_pairwise/alpha__beta.csv",
        "r2_pairwise/beta__gamma.csv",
    ]
    for relative in expected:
        assert (out / relative).exists(), relative
    assert not (out / INCOMPLETE_MARKER).exists()
    assert not (out / "portfolio_summary.csv").exists()


def test_metrics_table_round_trip(tiny_run):
    out, metrics = tiny_run
    assert set(metrics["model"]) == {"DRS", "EW", "BMA", "LASSO", "PCA", "HA", "full", *TINY_GROUPS}
    again = pd.read_csv(out / "metrics.csv", comment="#")
    pd.testing.assert_frame_equal(again, metrics, check_dtype=False)
    drs = metrics.set_index("model").loc["DRS"]
    assert drs.rmsfe_pct_vs_reference == 0.0
    assert drs.lpdr_final == 0.0
    assert np.all(metrics["rmsfe"] > 0)


def test_trajectories_cover_the_evaluation_window(tiny_run):
    out, _ = tiny_run
    lpdr = pd.read_csv(out / "lpdr/h1/HA.csv")
    # tiny preset: 120 months, scored window is the last quarter
    assert len(lpdr) == 30
    assert lpdr["date"].iloc[0] == "1997-07"
    assert lpdr["date"].iloc[-1] == "1999-12"
    assert (pd.read_csv(out / "lpdr/h1/DRS.csv")["value"] == 0.0).all()

    forecasts = pd.read_csv(out / "forecasts_h1.csv")
    assert len(forecasts) == 30 * 10
    assert np.isfinite(forecasts["log_density"]).all()


def test_coefficient_table(tiny_run):
    out, _ = tiny_run
    coefficients = pd.read_csv(out / "coefficients_h1.csv", index_col="date")
    assert list(coefficients.columns) == ["intercept", *TINY_GROUPS]
    assert len(coefficients) == 30
    # blocks of three origins share one fitted chain
    np.testing.assert_array_equal(coefficients.iloc[0].to_numpy(), coefficients.iloc[2].to_numpy())


def test_r2_trajectories_are_probabilities(tiny_run):
    out, _ = tiny_run
    r2 = pd.read_csv(out / "r2_full/gamma.csv")["value"]
    # last chain is fit at the origin of the final block (month 117), starting from month 61
    assert len(r2) == 57
    assert ((r2 >= 0.0) & (r2 <= 1.0)).all()


def test_config_manifest(tiny_run):
    out, _ = tiny_run
    manifest = json.loads((out / "config_used.json").read_text(encoding="utf-8"))
    assert manifest["mcmc"]["n_saved"] == 30
    assert manifest["splits"]["calibration_end"] == "1997-06"


def test_repeated_runs_are_identical(tiny_files, tiny_run, tmp_path):
    out, _ = tiny_run
    _run(tiny_files, tmp_path)
    for name in ("metrics.csv", "forecasts_h1.csv", "coefficients_h1.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_forecasts_ignore_data_after_the_origin(tiny_files, tiny_run, tmp_path):
    """Perturbing every value from 1999-01 on leaves earlier forecasts untouched"""
    out, _ = tiny_run
    cutoff = "1999-01"
    lines = tiny_files["panel"].read_text(encoding="utf-8").splitlines()
    perturbed = [lines[0]]
    for line in lines[1:]:
        date, *values = line.split(",")
        if date >= cutoff:
            values = [repr(float(v) + 5.0) for v in values]
        perturbed.append(",".join([date, *values]))
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    (data_dir / "tiny.csv").write_text("\n".join(perturbed) + "\n", encoding="utf-8")
    (data_dir / "tiny_groups.yaml").write_bytes(tiny_files["groups"].read_bytes())
    (data_dir / "tiny_experiment.toml").write_bytes(tiny_files["config"].read_bytes())

    _run({"config": data_dir / "tiny_experiment.toml"}, tmp_path / "out")
    base = pd.read_csv(out / "forecasts_h1.csv")
    moved = pd.read_csv(tmp_path / "out" / "forecasts_h1.csv")

    points_fixed = base["date"] <= cutoff
    np.testing.assert_array_equal(moved.loc[points_fixed, "point"], base.loc[points_fixed, "point"])
    scores_fixed = base["date"] < cutoff
    np.testing.assert_array_equal(moved.loc[scores_fixed, "log_density"], base.loc[scores_fixed, "log_density"])
    assert not np.allclose(moved.loc[~points_fixed, "point"], base.loc[~points_fixed, "point"])


def test_cli_synth_data(tmp_path):
    assert main(["synth-data", "--preset", "recovery", "--out", str(tmp_path / "rec.csv"), "--seed", "3"]) == 0
    assert (tmp_path / "rec.csv").exists()
    assert (tmp_path / "rec_groups.yaml").exists()
    assert (tmp_path / "rec_experiment.toml").exists()


def test_cli_rejects_splits_outside_the_panel(tiny_files, tmp_path):
    text = tiny_files["config"].read_text(encoding="utf-8")
    bad = tmp_path / "bad.toml"
    panel_dir = tiny_files["panel"].parent
    bad.write_text(
        text.replace('train_end = "1994-12"', 'train_end = "1980-01"')
            .replace('"tiny.csv"', f'"{(panel_dir / "tiny.csv").as_posix()}"')
            .replace('"tiny_groups.yaml"', f'"{(panel_dir / "tiny_groups.yaml").as_posix()}"'),
        encoding="utf-8",
    )
    code = main(["run", "--config", str(bad), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "failed [config]" in (tmp_path / "out" / INCOMPLETE_MARKER).read_text(encoding="utf-8")


def test_cli_rejects_unordered_splits(tiny_files, tmp_path):
    text = tiny_files["config"].read_text(encoding="utf-8")
    bad = tmp_path / "bad.toml"
    bad.write_text(text.replace('evaluation_end = "1999-12"', 'evaluation_end = "1996-01"'), encoding="utf-8")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "out")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.toml")]) == 2


def test_portfolio_reports_on_finance_preset(tmp_path):
    files = write_preset("finance", tmp_path / "data" / "finance.csv", seed=1)
    _run(files, tmp_path / "out", **{
        "forecast.models": ["DRS", "HA", "EW"],
        "splits.evaluation_end": "1998-09",
        "portfolio.n_draws": 300,
    })
    out = tmp_path / "out"
    summary = pd.read_csv(out / "portfolio_summary.csv").set_index("model")
    assert list(summary.index) == ["DRS", "HA", "EW"]
    assert summary.loc["DRS", "CER"] == 0.0
    assert summary.loc["DRS", "final_CCER_no_short"] == 0.0

    wealth = pd.read_csv(out / "portfolio/no_short/HA.csv")
    assert len(wealth) == 15
    assert ((wealth["weight"] >= 0.0) & (wealth["weight"] <= 1.0)).all()
    assert (wealth["realized_wealth"] > 0).all()
    assert (out / "ccer/unconstrained/EW.csv").exists()


@pytest.mark.slow
def test_customized_and_direct_synthesis(tiny_files, tmp_path):
    _run(tiny_files, tmp_path, **{
        "forecast.horizons": [1, 2],
        "forecast.multi_step_mode": "both",
        "forecast.models": ["DRS", "DRS_direct", "HA"],
    })
    h1 = pd.read_csv(tmp_path / "forecasts_h1.csv")
    drs = h1[h1["model"] == "DRS"].reset_index(drop=True)
    direct = h1[h1["model"] == "DRS_direct"].reset_index(drop=True)
    # one-step direct and customized synthesis are the same chain
    pd.testing.assert_series_equal(drs["point"], direct["point"])

    h2 = pd.read_csv(tmp_path / "forecasts_h2.csv")
    assert set(h2["model"]) == {"DRS", "DRS_direct", "HA"}
    assert np.isfinite(h2["log_density"]).all()
    metrics = pd.read_csv(tmp_path / "metrics.csv", comment="#")
    assert sorted(metrics["horizon"].unique()) == [1, 2]


def test_metrics_file_labels_its_conventions(tiny_run):
    out, _ = tiny_run
    lines = (out / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# reference model: DRS"
    assert any("rmsfe_pct_vs_reference = 100 * (rmsfe_reference - rmsfe_model) / rmsfe_model" in line
               for line in lines if line.startswith("#"))
    assert lines[3].startswith("model,horizon,rmsfe,")


def test_warm_started_chains_keep_the_report_shape(tiny_files, tiny_run, tmp_path):
    out, _ = tiny_run
    _run(tiny_files, tmp_path / "first", **{"mcmc.warm_start": True})
    _run(tiny_files, tmp_path / "second", **{"mcmc.warm_start": True})
    for name in ("metrics.csv", "forecasts_h1.csv", "coefficients_h1.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes(), name

    cold = pd.read_csv(out / "forecasts_h1.csv")
    warm = pd.read_csv(tmp_path / "first" / "forecasts_h1.csv")
    assert list(warm.columns) == list(cold.columns)
    assert warm.shape == cold.shape
    pd.testing.assert_series_equal(warm["date"], cold["date"])
    assert np.isfinite(warm["log_density"]).all()


def test_draw_dump_reloads_with_chain_dimensions(tiny_files, tmp_path):
    _run(tiny_files, tmp_path, **{"mcmc.dump_draws": True})
    draws = pd.read_csv(tmp_path / "draws" / "synthesis_draws.csv")
    # final chain: 30 saved sweeps over 57 months
    assert list(draws.columns) == ["iteration", "t", "date", "theta_0", *(f"theta_{g}" for g in TINY_GROUPS), "v"]
    assert len(draws) == 30 * 57
    assert draws["iteration"].nunique() == 30
    assert draws["t"].max() == 56
    assert (draws["v"] > 0).all()


def test_cli_rejects_group_named_like_a_model(tiny_files, tmp_path):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    (data_dir / "tiny.csv").write_bytes(tiny_files["panel"].read_bytes())
    groups = tiny_files["groups"].read_text(encoding="utf-8").replace("alpha:", "LASSO:")
    (data_dir / "tiny_groups.yaml").write_text(groups, encoding="utf-8")
    (data_dir / "tiny_experiment.toml").write_bytes(tiny_files["config"].read_bytes())
    code = main(["run", "--config", str(data_dir / "tiny_experiment.toml"), "--out", str(tmp_path / "out")])
    assert code == 2


def test_cli_rejects_unknown_model(tiny_files, tmp_path):
    code = main(["run", "--config", str(tiny_files["config"]), "--out", str(tmp_path / "out"), "--models", "DRS,ARIMA"])
    assert code == 2


def test_preset_experiment_files_carry_synthesis_setup(tmp_path):
    finance = write_preset("finance", tmp_path / "finance.csv", seed=0)
    text = finance["config"].read_text(encoding="utf-8")
    assert "[synthesis]" in text
    assert "delta = 0.95" in text
    assert "beta = 0.99" in text
    assert "n0 = 12.0" in text
    cfg = load_experiment_config(finance["config"])
    assert cfg.synthesis.m0 == [0.0] * 9
    assert (cfg.synthesis.delta, cfg.synthesis.beta, cfg.synthesis.n0) == (0.95, 0.99, 12.0)

    macro = write_preset("macro", tmp_path / "macro.csv", seed=0)
    assert load_experiment_config(macro["config"]).synthesis.delta == 0.95
    assert load_experiment_config(macro["config"]).synthesis.m0 is None


@pytest.mark.slow
def test_drs_outscores_every_competitor_on_macro_panels(tmp_path):
    """DRS ends with the highest cumulative log score in at least 8 of 10 macro panels"""
    wins = 0
    for seed in range(10):
        files = write_preset("macro", tmp_path / f"data{seed}" / "macro.csv", seed=seed)
        cfg = load_experiment_config(files["config"], {
            "output_dir": tmp_path / f"out{seed}",
            "seed": seed,
            "mcmc.burn_in": 300,
            "mcmc.n_saved": 500,
            "mcmc.origin_stride": 3,
            "baselines.lasso_grid_size": 25,
            "forecast.models": ["DRS", "EW", "BMA", "LASSO", "PCA", "groups"],
        })
        metrics = DecoupleRecoupleRunner(cfg, runtime=RuntimeSettings(workers=4)).run_experiment()
        assert len(pd.read_csv(tmp_path / f"out{seed}" / "lpdr/h1/EW.csv")) == 150
        others = metrics[metrics["model"] != "DRS"]
        assert len(others) == 4 + 8
        wins += bool((others["lpdr_final"] < 0.0).all())
    assert wins >= 8


@pytest.mark.slow
def test_desk_scale_macro_run_finishes_in_fifteen_minutes(tmp_path):
    files = write_preset("macro", tmp_path / "data" / "macro.csv", seed=0)
    cfg = load_experiment_config(files["config"], {"output_dir": tmp_path / "out"})
    assert (cfg.mcmc.burn_in, cfg.mcmc.n_saved, cfg.mcmc.origin_stride) == (500, 1000, 3)

    started = time.perf_counter()
    DecoupleRecoupleRunner(cfg, runtime=RuntimeSettings(workers=4)).run_experiment()
    assert time.perf_counter() - started < 15 * 60

    out = tmp_path / "out"
    groups = ["output", "labor", "housing", "consumption", "money", "rates", "prices", "stocks"]
    for relative in ["metrics.csv", "forecasts_h1.csv", "coefficients_h1.csv", "config_used.json",
                     "lpdr/h1/LASSO.csv", *(f"r2_full/{g}.csv" for g in groups)]:
        assert (out / relative).exists(), relative
    assert len(list((out / "r2_pairwise").glob("*.csv"))) == 28
    assert not (out / INCOMPLETE_MARKER).exists()
