"""
DRSYNTH - Report Storage Manager
Writes every experiment artifact as delimited text under the output directory
and keeps the INCOMPLETE marker while a run is in progress
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import ExperimentConfig
from errors import DRSynthError, ReportWriteError
from evaluation import ForecastRecord, lpdr_series, metrics_preamble, metrics_table
from portfolio import WealthPath
from synthesis_mcmc import SynthesisPosterior

logger = logging.getLogger(__name__)

INCOMPLETE_MARKER = "INCOMPLETE"


@dataclass
class ExperimentResults:
    """Everything a finished run hands to the report writer"""
    reference: str
    # horizon -> model -> records in evaluation-date order
    records: Dict[int, Dict[str, List[ForecastRecord]]] = field(default_factory=dict)
    # horizon -> posterior-mean synthesis coefficients per evaluation date
    coefficients: Dict[int, pd.DataFrame] = field(default_factory=dict)
    r2_full: Dict[str, pd.Series] = field(default_factory=dict)
    r2_pairwise: Dict[Tuple[str, str], pd.Series] = field(default_factory=dict)
    # constraint -> model -> realized wealth path
    wealth_paths: Dict[str, Dict[str, WealthPath]] = field(default_factory=dict)
    ccer: Dict[str, Dict[str, pd.Series]] = field(default_factory=dict)
    portfolio_summary: Optional[pd.DataFrame] = None
    final_posterior: Optional[SynthesisPosterior] = None


def _series_frame(series: pd.Series) -> pd.DataFrame:
    frame = pd.DataFrame({"value": series.to_numpy()}, index=series.index.astype(str))
    frame.index.name = "date"
    return frame


class ReportStorageManager:
    """Owns the output directory of one run"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.written: List[Path] = []

    @property
    def marker_path(self) -> Path:
        return self.output_dir / INCOMPLETE_MARKER

    def begin_run(self) -> None:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            self.marker_path.write_text("run in progress\n", encoding="utf-8")
        except OSError as e:
            raise ReportWriteError(f"cannot prepare output directory ({e})", str(self.output_dir)) from e
        logger.info(f"💾 Writing results to {self.output_dir}")

    def mark_failed(self, error: BaseException) -> None:
        category = error.category if isinstance(error, DRSynthError) else "unexpected"
        try:
            self.marker_path.write_text(f"failed [{category}]: {error}\n", encoding="utf-8")
        except OSError:
            logger.error(f"❌ Could not update {self.marker_path}")

    def finish_run(self) -> None:
        if self.marker_path.exists():
            self.marker_path.unlink()
        logger.info(f"✅ Run complete: {len(self.written)} files in {self.output_dir}")

    def write_frame(self, frame: pd.DataFrame, relative: str, index: bool = True,
                    preamble: Sequence[str] = ()) -> Path:
        """CSV under the output directory; preamble lines go first as `# ...` comments"""
        path = self.output_dir / relative
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as handle:
                for line in preamble:
                    handle.write(f"# {line}\n")
                frame.to_csv(handle, index=index, lineterminator="\n")
        except OSError as e:
            raise ReportWriteError(f"cannot write report ({e})", str(path)) from e
        self.written.append(path)
        return path

    def write_config(self, cfg: ExperimentConfig) -> Path:
        """Validated configuration, without timestamps so repeated runs stay byte-identical"""
        path = self.output_dir / "config_used.json"
        try:
            path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
        except OSError as e:
            raise ReportWriteError(f"cannot write configuration manifest ({e})", str(path)) from e
        self.written.append(path)
        return path

    def write_draws(self, posterior: SynthesisPosterior, relative: str = "draws/synthesis_draws.csv") -> Path:
        """Long-format dump of the saved chain: one row per (iteration, t)"""
        S, T, p = posterior.theta.shape
        columns = {
            "iteration": np.repeat(np.arange(S), T),
            "t": np.tile(np.arange(T), S),
            "date": np.tile(posterior.dates.astype(str), S),
            "theta_0": posterior.theta[:, :, 0].ravel(),
        }
        for j, name in enumerate(posterior.agent_names, start=1):
            columns[f"theta_{name}"] = posterior.theta[:, :, j].ravel()
        columns["v"] = posterior.v.ravel()
        return self.write_frame(pd.DataFrame(columns), relative, index=False)

    def emit_reports(self, results: ExperimentResults, cfg: ExperimentConfig) -> pd.DataFrame:
        """Write metrics, trajectories, diagnostics and portfolio tables; returns the metrics table"""
        tables = []
        for k, by_model in sorted(results.records.items()):
            tables.append(metrics_table(by_model, results.reference, k))

            long_rows = [
                {"date": str(r.date), "model": r.model, "point": r.point,
                 "realized": r.realized, "log_density": r.log_density}
                for records in by_model.values() for r in records
            ]
            self.write_frame(pd.DataFrame(long_rows), f"forecasts_h{k}.csv", index=False)

            reference = by_model[results.reference]
            for model, records in by_model.items():
                self.write_frame(_series_frame(lpdr_series(records, reference)), f"lpdr/h{k}/{model}.csv")

        metrics = pd.concat(tables, ignore_index=True) if tables else pd.DataFrame()
        self.write_frame(metrics, "metrics.csv", index=False, preamble=metrics_preamble(results.reference))

        for k, frame in sorted(results.coefficients.items()):
            out = frame.copy()
            out.index = out.index.astype(str)
            out.index.name = "date"
            self.write_frame(out, f"coefficients_h{k}.csv")

        for group, series in results.r2_full.items():
            self.write_frame(_series_frame(series), f"r2_full/{group}.csv")
        for (j, q), series in results.r2_pairwise.items():
            self.write_frame(_series_frame(series), f"r2_pairwise/{j}__{q}.csv")

        for constraint, paths in results.wealth_paths.items():
            for model, path in paths.items():
                frame = path.to_frame()
                frame.index = frame.index.astype(str)
                self.write_frame(frame, f"portfolio/{constraint}/{model}.csv")
        for constraint, series_by_model in results.ccer.items():
            for model, series in series_by_model.items():
                self.write_frame(_series_frame(series), f"ccer/{constraint}/{model}.csv")
        if results.portfolio_summary is not None:
            self.write_frame(results.portfolio_summary, "portfolio_summary.csv", index=False)

        if cfg.mcmc.dump_draws and results.final_posterior is not None:
            self.write_draws(results.final_posterior)

        self.write_config(cfg)
        logger.info(f"📊 Reports emitted: {len(self.written)} files")
        return metrics


def create_storage_manager(cfg: ExperimentConfig) -> ReportStorageManager:
    return ReportStorageManager(cfg.output_dir)
