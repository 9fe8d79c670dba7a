#!/usr/bin/env python3
"""
DRSYNTH - Main Application
Decouple-recouple forecasting experiments: subgroup DLM agents, Bayesian
predictive synthesis re-run at every forecast origin, baselines, density and
portfolio evaluation, and report emission
"""

import argparse
import logging
import sys
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from rich.console import Console
from rich.logging import RichHandler
from tabulate import tabulate

from baselines import (
    LinearPool,
    bma_lagged_weights,
    historical_average,
    lasso_forecast,
    pca_forecast,
)
from config import (
    DEFAULT_MODELS,
    MODEL_NAMES,
    BaselineSection,
    ExperimentConfig,
    RuntimeSettings,
    load_experiment_config,
    settings,
)
from dlm_engine import DensityPath, DiscountConfig, DLMPosterior, StudentTDensity, agent_density_path
from errors import ConfigError, DataValidationError, DRSynthError
from evaluation import make_record, mc_r2_full, mc_r2_pairwise
from portfolio import (
    AllocationConfig,
    WealthPath,
    annualize,
    ccer_series,
    cer_aggregate,
    cer_single_period,
    optimal_weight,
    realized_utility_series,
)
from storage import ExperimentResults, ReportStorageManager, create_storage_manager
from synthesis_mcmc import (
    AgentDensities,
    GibbsConfig,
    SynthesisForecast,
    SynthesisPosterior,
    default_synthesis_prior,
    init_latent_states,
    predict_k_step,
    run_gibbs,
)
from synthetic import PRESETS, write_preset
from timeseries_data import (
    GroupPartition,
    PanelSchema,
    TimeSeriesPanel,
    build_supervised,
    full_partition,
    load_group_mapping,
    load_panel,
    partition_groups,
)

logger = logging.getLogger(__name__)

MODE_IDS = {"customized": 0, "direct": 1}
CONSTRAINTS = ("unconstrained", "no_short")


def configure_logging(runtime: RuntimeSettings) -> None:
    """Route all logging to stderr through rich; results only ever go to files"""
    logging.basicConfig(
        level=runtime.log_level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=runtime.rich_tracebacks,
                              show_path=False)],
        force=True,
    )
    logging.getLogger("joblib").setLevel(logging.WARNING)


@contextmanager
def log_phase(name: str):
    start = time.perf_counter()
    logger.info(f"🔄 Phase '{name}' started")
    try:
        yield
    except DRSynthError as e:
        logger.error(f"❌ Phase '{name}' failed: {e}")
        raise
    logger.info(f"✅ Phase '{name}' done in {time.perf_counter() - start:.1f}s")


# ============================================================================
# PER-ORIGIN SYNTHESIS
# ============================================================================

@dataclass
class SynthesisTarget:
    """One forecast issued from a fitted chain"""
    index: int
    extra_steps: int
    densities: List[StudentTDensity]
    seed: Tuple[int, ...]


@dataclass
class SynthesisBlock:
    """One MCMC fit plus every forecast served by it (origin thinning)"""
    y: np.ndarray
    H: AgentDensities
    gibbs: GibbsConfig
    mode: str
    horizon: int
    targets: List[SynthesisTarget]
    replicates: int = 1
    keep_posterior: bool = False
    init_x: Optional[np.ndarray] = None


@dataclass
class BlockResult:
    forecasts: List[Tuple[int, SynthesisForecast]]
    coefficients: np.ndarray
    last_x: np.ndarray
    posterior: Optional[SynthesisPosterior] = None


def run_synthesis_block(block: SynthesisBlock) -> BlockResult:
    """Fit the chain on data up to the block's origin and issue its forecasts"""
    draws = run_gibbs(block.y, block.H, block.gibbs, rng=np.random.default_rng(block.gibbs.seed),
                      init_x=block.init_x)
    posterior = SynthesisPosterior.from_draws(draws, block.H, block.gibbs.disc)
    logger.debug(f"Chain through {block.H.dates[-1]} serves {len(block.targets)} origin(s) (h={block.horizon})")
    forecasts = []
    for target in block.targets:
        rng = np.random.default_rng(np.random.SeedSequence(list(target.seed)))
        forecasts.append((target.index, predict_k_step(block.mode, posterior, target.densities, block.horizon,
                                                       rng, replicates=block.replicates,
                                                       extra_steps=target.extra_steps)))
    return BlockResult(
        forecasts=forecasts,
        coefficients=posterior.terminal_theta_mean(),
        last_x=draws[-1].x,
        posterior=posterior if block.keep_posterior else None,
    )


def _stable_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def forecast_lasso_pca(X: np.ndarray, y: np.ndarray, dates: pd.PeriodIndex, t: pd.Period, k: int,
                       base: BaselineSection, disc: DiscountConfig, n0: float, s0: float,
                       need_lasso: bool, need_pca: bool) -> Dict[str, StudentTDensity]:
    """LASSO and PCA densities for target t, fit on design rows with targets up to the origin t-k"""
    origin = t - k
    train = dates <= origin
    x_new = X[int(np.flatnonzero(dates == t)[0])]
    out = {}
    if need_lasso:
        out["LASSO"], _ = lasso_forecast(X[train], y[train], x_new, grid_size=base.lasso_grid_size,
                                         min_ratio=base.lasso_min_ratio, max_sweeps=base.lasso_max_sweeps,
                                         tol=base.lasso_tol, variance_floor=base.variance_floor,
                                         window=str(origin))
    if need_pca:
        out["PCA"] = pca_forecast(X[train], y[train], x_new, base.pca_factors, disc, n0=n0, s0=s0, steps=k)
    return out


# ============================================================================
# EXPERIMENT RUNNER
# ============================================================================

@dataclass
class HorizonContext:
    """Agent densities and designs of one horizon"""
    k: int
    eval_dates: pd.PeriodIndex
    agent_paths: Dict[str, DensityPath]
    predictives: Dict[str, List[object]] = field(default_factory=dict)


class DecoupleRecoupleRunner:
    """Runs one experiment end to end"""

    def __init__(self, cfg: ExperimentConfig, runtime: RuntimeSettings = settings):
        self.cfg = cfg
        self.runtime = runtime
        self.workers = max(1, runtime.workers)
        self.storage: ReportStorageManager = create_storage_manager(cfg)
        self.panel: Optional[TimeSeriesPanel] = None
        self.partition: Optional[GroupPartition] = None
        self.models: List[str] = []
        self._agent_cache: Dict[int, Dict[str, DensityPath]] = {}

    # -- setup ---------------------------------------------------------------

    def load_inputs(self) -> None:
        data = self.cfg.data
        schema = PanelSchema(target=data.target, date_column=data.date_column,
                             predictors=data.predictors, risk_free=data.risk_free)
        self.panel = load_panel(data.panel_path, schema)
        self.partition = partition_groups(self.panel, load_group_mapping(data.groups_path))
        self._validate_splits()
        self.models = self._resolve_models()

    def _validate_splits(self) -> None:
        splits = self.cfg.splits
        for label in ("train_end", "calibration_end", "evaluation_end"):
            value = getattr(splits, label)
            try:
                self.panel.position(value)
            except DataValidationError:
                raise ConfigError(f"splits.{label}={value} is not a date of the panel "
                                  f"({self.panel.dates[0]}..{self.panel.dates[-1]})") from None
        calibration_start = self.panel.position(splits.train_end) + 1
        for k in self.cfg.forecast.horizons:
            if calibration_start < k:
                raise ConfigError(f"training period shorter than horizon {k}")
            first_origin = self.panel.position(splits.calibration_end) + 1 - k
            if first_origin - calibration_start + 1 < 2:
                raise ConfigError(f"calibration window too short for horizon {k}: the first origin "
                                  f"has fewer than 2 synthesis periods")

    def _resolve_models(self) -> List[str]:
        forecast = self.cfg.forecast
        requested = forecast.models
        if requested is None:
            requested = list(DEFAULT_MODELS)
            if forecast.multi_step_mode == "both":
                requested.insert(1, "DRS_direct")
        models = []
        for name in requested:
            if name == "groups":
                for group in self.partition.names:
                    if group in MODEL_NAMES:
                        raise ConfigError(f"group name '{group}' collides with a model name")
                    models.append(group)
            elif name not in models:
                models.append(name)
        if forecast.reference_model not in models:
            logger.warning(f"⚠️ Reference model '{forecast.reference_model}' added to the model list")
            models.insert(0, forecast.reference_model)
        return models

    @property
    def primary_mode(self) -> str:
        return "direct" if self.cfg.forecast.multi_step_mode == "direct" else "customized"

    def _disc(self, section) -> DiscountConfig:
        return DiscountConfig(delta=section.delta, beta=section.beta)

    def _agent_paths(self, k: int) -> Dict[str, DensityPath]:
        """Lag-k subgroup DLMs filtered over the whole panel"""
        if k not in self._agent_cache:
            agents = self.cfg.agents
            slices = build_supervised(self.panel, self.partition, k, intercept=self.cfg.data.intercept,
                                      standardize=self.cfg.data.standardize)
            paths = {}
            for name, slice_ in slices.items():
                prior = DLMPosterior.initial(slice_.X.shape[1], n0=agents.n0, s0=agents.s0)
                paths[name], _ = agent_density_path(name, slice_, prior, self._disc(agents))
            self._agent_cache[k] = paths
            logger.info(f"📊 {len(paths)} agents filtered at lag {k}")
        return self._agent_cache[k]

    def _eval_dates(self) -> pd.PeriodIndex:
        dates = self.panel.dates
        lo = self.panel.position(self.cfg.splits.calibration_end)
        hi = self.panel.position(self.cfg.splits.evaluation_end)
        return dates[lo + 1: hi + 1]

    @property
    def calibration_start(self) -> pd.Period:
        return self.panel.dates[self.panel.position(self.cfg.splits.train_end) + 1]

    # -- synthesis -------------------------------------------------------------

    def _synthesis_forecasts(self, ctx: HorizonContext, mode: str,
                             keep_final: bool) -> Tuple[List[SynthesisForecast], np.ndarray, Optional[SynthesisPosterior]]:
        k = ctx.k
        mcmc = self.cfg.mcmc
        synthesis = self.cfg.synthesis
        train_paths = list((ctx.agent_paths if mode == "customized" else self._agent_paths(1)).values())
        target_paths = list(ctx.agent_paths.values())
        J = len(train_paths)
        disc = self._disc(synthesis)
        if synthesis.m0 is not None and len(synthesis.m0) != J + 1:
            raise ConfigError(f"synthesis.m0 needs J+1={J + 1} entries, got {len(synthesis.m0)}")
        prior = default_synthesis_prior(J, n0=synthesis.n0, s0=synthesis.s0, m0=synthesis.m0)

        origins = [t - k for t in ctx.eval_dates]
        blocks = []
        stride = mcmc.origin_stride
        for start in range(0, len(origins), stride):
            fit_origin = origins[start]
            lo = self.panel.position(str(self.calibration_start))
            hi = self.panel.position(str(fit_origin))
            y = self.panel.target[lo: hi + 1]
            H = AgentDensities.from_paths(train_paths, self.calibration_start, fit_origin)
            seed = np.random.SeedSequence([self.cfg.seed, k, start, MODE_IDS[mode]]).generate_state(1)[0]
            targets = [
                SynthesisTarget(
                    index=i,
                    extra_steps=(origins[i] - fit_origin).n,
                    densities=[path.at(ctx.eval_dates[i]) for path in target_paths],
                    seed=(self.cfg.seed, k, i, MODE_IDS[mode], 1),
                )
                for i in range(start, min(start + stride, len(origins)))
            ]
            blocks.append(SynthesisBlock(
                y=y, H=H,
                gibbs=GibbsConfig(burn_in=mcmc.burn_in, n_saved=mcmc.n_saved, disc=disc, prior=prior,
                                  seed=int(seed)),
                mode=mode, horizon=k, targets=targets, replicates=mcmc.predictive_replicates,
                keep_posterior=keep_final and start + stride >= len(origins),
            ))

        logger.info(f"🔄 DRS ({mode}, h={k}): {len(blocks)} chains of {mcmc.burn_in}+{mcmc.n_saved} sweeps "
                    f"for {len(origins)} origins")
        if mcmc.warm_start:
            results = []
            previous = None
            for block in blocks:
                if previous is not None:
                    tail = AgentDensities(names=block.H.names, dates=block.H.dates[len(previous):],
                                          location=block.H.location[len(previous):],
                                          scale=block.H.scale[len(previous):], dof=block.H.dof[len(previous):],
                                          horizon=block.H.horizon)
                    rng = np.random.default_rng(np.random.SeedSequence([block.gibbs.seed, 2]))
                    block.init_x = np.vstack([previous, init_latent_states(tail, rng)])
                result = run_synthesis_block(block)
                previous = result.last_x
                results.append(result)
        else:
            results = Parallel(n_jobs=self.workers)(delayed(run_synthesis_block)(block) for block in blocks)

        forecasts: List[Optional[SynthesisForecast]] = [None] * len(origins)
        coefficients = np.empty((len(origins), J + 1))
        final = None
        for result in results:
            for index, forecast in result.forecasts:
                forecasts[index] = forecast
                coefficients[index] = result.coefficients
            if result.posterior is not None:
                final = result.posterior
        return forecasts, coefficients, final

    # -- baselines -------------------------------------------------------------

    def _full_design(self, k: int):
        slices = build_supervised(self.panel, full_partition(self.partition), k, intercept=False,
                                  standardize=self.cfg.data.standardize)
        slice_ = next(iter(slices.values()))
        return slice_.dates, slice_.X, slice_.y

    def _baseline_predictives(self, ctx: HorizonContext) -> Dict[str, List[object]]:
        k = ctx.k
        names = list(ctx.agent_paths)
        paths = list(ctx.agent_paths.values())
        rows = [[path.at(t) for path in paths] for t in ctx.eval_dates]
        out: Dict[str, List[object]] = {}

        if "EW" in self.models:
            out["EW"] = [LinearPool(components=tuple(row), weights=np.full(len(row), 1.0 / len(row))) for row in rows]

        if "BMA" in self.models:
            windows = [path.window(self.calibration_start, ctx.eval_dates[-1]) for path in paths]
            dates = windows[0].dates
            densities = [[w[i] for w in windows] for i in range(len(dates))]
            y = self.panel.target[self.panel.position(str(dates[0])): self.panel.position(str(dates[-1])) + 1]
            weights = bma_lagged_weights(densities, y, k)
            offset = int(np.flatnonzero(dates == ctx.eval_dates[0])[0])
            out["BMA"] = [LinearPool(components=tuple(row), weights=weights[offset + i])
                          for i, row in enumerate(rows)]

        for j, name in enumerate(names):
            if name in self.models:
                out[name] = [row[j] for row in rows]

        if "HA" in self.models:
            out["HA"] = [
                historical_average(self.panel.target[: self.panel.position(str(t - k)) + 1],
                                   variance_floor=self.cfg.baselines.variance_floor)
                for t in ctx.eval_dates
            ]

        if "full" in self.models:
            agents = self.cfg.agents
            slice_ = next(iter(build_supervised(self.panel, full_partition(self.partition), k,
                                                intercept=self.cfg.data.intercept,
                                                standardize=self.cfg.data.standardize).values()))
            prior = DLMPosterior.initial(slice_.X.shape[1], n0=agents.n0, s0=agents.s0)
            path, _ = agent_density_path("full", slice_, prior, self._disc(agents))
            out["full"] = [path.at(t) for t in ctx.eval_dates]

        need_lasso, need_pca = "LASSO" in self.models, "PCA" in self.models
        if need_lasso or need_pca:
            dates, X, y = self._full_design(k)
            agents = self.cfg.agents
            fitted = Parallel(n_jobs=self.workers)(
                delayed(forecast_lasso_pca)(X, y, dates, t, k, self.cfg.baselines, self._disc(agents),
                                            agents.n0, agents.s0, need_lasso, need_pca)
                for t in ctx.eval_dates
            )
            for model in ("LASSO", "PCA"):
                if model in self.models:
                    out[model] = [f[model] for f in fitted]
        return out

    # -- portfolio -------------------------------------------------------------

    def _portfolio(self, ctx: HorizonContext, results: ExperimentResults) -> None:
        pcfg = self.cfg.portfolio
        dates = ctx.eval_dates
        realized = np.array([self.panel.target[self.panel.position(str(t))] for t in dates])
        if self.panel.risk_free is None:
            logger.warning("⚠️ No risk-free column: using r_f = 0")
            risk_free = np.zeros(len(dates))
        else:
            risk_free = np.array([self.panel.risk_free[self.panel.position(str(t))] for t in dates])

        bounds = {"unconstrained": pcfg.unconstrained_bounds, "no_short": pcfg.constrained_bounds}
        reference = results.reference
        paths: Dict[str, Dict[str, WealthPath]] = {c: {} for c in CONSTRAINTS}
        for model in self.models:
            draws = []
            for i, predictive in enumerate(ctx.predictives[model]):
                rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 1, i, _stable_id(model), 7]))
                draws.append(predictive.sample(rng, pcfg.n_draws))
            for constraint in CONSTRAINTS:
                lower, upper = bounds[constraint]
                allocation = AllocationConfig(gamma=pcfg.gamma, lower=lower, upper=upper, step=pcfg.step)
                try:
                    weights = [optimal_weight(d, rf, allocation) for d, rf in zip(draws, risk_free)]
                    paths[constraint][model] = realized_utility_series(dates, weights, realized, risk_free, pcfg.gamma)
                except DRSynthError as e:
                    logger.error(f"❌ Portfolio '{model}' ({constraint}) failed: {e}")
                    raise

        scale = pcfg.periods_per_year if pcfg.annualize else 1
        rows = []
        ccer: Dict[str, Dict[str, pd.Series]] = {c: {} for c in CONSTRAINTS}
        for model in self.models:
            row = {"model": model}
            for constraint in CONSTRAINTS:
                suffix = "" if constraint == "unconstrained" else "_no_short"
                path, ref = paths[constraint][model], paths[constraint][reference]
                single = cer_single_period(path.utility, ref.utility, pcfg.gamma)
                ccer[constraint][model] = ccer_series(single, dates)
                row[f"CER{suffix}"] = float(annualize(cer_aggregate(path, ref, pcfg.gamma), scale))
                row[f"mean_single_period_CER{suffix}"] = float(annualize(single.mean(), scale))
                row[f"final_CCER{suffix}"] = float(ccer[constraint][model].iloc[-1])
            rows.append(row)

        results.wealth_paths = paths
        results.ccer = ccer
        results.portfolio_summary = pd.DataFrame(rows, columns=[
            "model", "CER", "CER_no_short", "mean_single_period_CER", "final_CCER",
            "mean_single_period_CER_no_short", "final_CCER_no_short",
        ])

    # -- main loop -------------------------------------------------------------

    def run_experiment(self) -> pd.DataFrame:
        self.storage.begin_run()
        try:
            metrics = self._run()
        except BaseException as e:
            self.storage.mark_failed(e)
            raise
        self.storage.finish_run()
        return metrics

    def _run(self) -> pd.DataFrame:
        with log_phase("inputs"):
            self.load_inputs()

        forecast_cfg = self.cfg.forecast
        results = ExperimentResults(reference=forecast_cfg.reference_model)
        eval_dates = self._eval_dates()
        contexts: Dict[int, HorizonContext] = {}

        with log_phase("agents"):
            for k in forecast_cfg.horizons:
                contexts[k] = HorizonContext(k=k, eval_dates=eval_dates, agent_paths=self._agent_paths(k))
            if "DRS_direct" in self.models or self.primary_mode == "direct":
                self._agent_paths(1)

        with log_phase("synthesis"):
            r2_horizon = forecast_cfg.horizons[0]
            for k, ctx in contexts.items():
                variants = []
                if "DRS" in self.models:
                    variants.append(("DRS", self.primary_mode))
                if "DRS_direct" in self.models:
                    variants.append(("DRS_direct", "direct"))
                for model, mode in variants:
                    same_chain = k == 1 or self.primary_mode == "direct"
                    if model == "DRS_direct" and "DRS" in ctx.predictives and same_chain:
                        # direct and customized synthesis coincide at one step
                        ctx.predictives[model] = ctx.predictives["DRS"]
                        continue
                    keep = model == "DRS" and k == r2_horizon
                    forecasts, coefficients, final = self._synthesis_forecasts(ctx, mode, keep_final=keep)
                    ctx.predictives[model] = forecasts
                    if model == "DRS":
                        train_names = list(ctx.agent_paths if mode == "customized" else self._agent_paths(1))
                        results.coefficients[k] = pd.DataFrame(
                            coefficients, index=eval_dates, columns=["intercept"] + train_names
                        )
                    if final is not None:
                        results.final_posterior = final

        with log_phase("baselines"):
            for ctx in contexts.values():
                ctx.predictives.update(self._baseline_predictives(ctx))

        with log_phase("evaluation"):
            for k, ctx in contexts.items():
                by_model = {}
                for model in self.models:
                    if model not in ctx.predictives:
                        raise ConfigError(f"model '{model}' produced no forecasts at horizon {k}")
                    by_model[model] = [
                        make_record(t, model, k, predictive, self.panel.target[self.panel.position(str(t))])
                        for t, predictive in zip(ctx.eval_dates, ctx.predictives[model])
                    ]
                results.records[k] = by_model

            posterior = results.final_posterior
            if posterior is not None and len(posterior.agent_names) >= 2:
                names = list(posterior.agent_names)
                for j, name in enumerate(names):
                    results.r2_full[name] = pd.Series(mc_r2_full(posterior.x, j), index=posterior.dates)
                for j in range(len(names)):
                    for q in range(j + 1, len(names)):
                        results.r2_pairwise[(names[j], names[q])] = pd.Series(
                            mc_r2_pairwise(posterior.x, j, q), index=posterior.dates
                        )

        if self.cfg.portfolio.enabled:
            with log_phase("portfolio"):
                if 1 not in contexts:
                    logger.warning("⚠️ Portfolio evaluation needs horizon 1; skipped")
                else:
                    self._portfolio(contexts[1], results)

        with log_phase("reports"):
            metrics = self.storage.emit_reports(results, self.cfg)

        logger.info("📊 FORECAST METRICS\n" + tabulate(metrics, headers="keys", tablefmt="github",
                                                        showindex=False, floatfmt=".4f"))
        return metrics


# ============================================================================
# CLI
# ============================================================================

def _csv_list(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [item.strip() for item in value.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drsynth", description="Decouple-recouple predictive synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--models", help="comma-separated model list")
    run.add_argument("--horizons", help="comma-separated horizons, e.g. 1,3")

    synth = sub.add_parser("synth-data", help="write a synthetic panel, group mapping and config")
    synth.add_argument("--preset", required=True, choices=sorted(PRESETS))
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--seed", type=int, default=0)
    return parser


def run_command(args: argparse.Namespace) -> None:
    horizons = _csv_list(args.horizons)
    if horizons is not None:
        try:
            horizons = [int(h) for h in horizons]
        except ValueError:
            raise ConfigError(f"--horizons must be integers, got '{args.horizons}'") from None
    overrides = {
        "seed": args.seed,
        "output_dir": args.out,
        "forecast.models": _csv_list(args.models),
        "forecast.horizons": horizons,
    }
    cfg = load_experiment_config(args.config, overrides)
    DecoupleRecoupleRunner(cfg).run_experiment()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(settings)
    try:
        if args.command == "run":
            run_command(args)
        else:
            write_preset(args.preset, args.out, seed=args.seed)
    except DRSynthError as e:
        logger.error(f"❌ [{e.category}] {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected failure: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
