"""Result bundles, repricing tables and plot data.

A bundle is a directory holding

    config.json        effective run configuration, every default materialized
    quotes.csv         the quotes that were calibrated
    result.json        convergence flag, objective, gradient norm, multipliers
    trace.csv          iteration, objective, grad_norm, phase
    repricing.csv      market against model price and implied vol per quote
    sigma2.field.txt   calibrated sigma^2 (field file)
    eta.field.txt      induced correlation (field file)

and, when field dumps are requested, phi.field.txt and density.field.txt.
Nothing time-dependent is written, so equal inputs give byte-equal bundles.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from lsv_calibrator.core.calibrator import CalibrationResult, IterationRecord, RepricingRow
from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.fields import read_field, write_field
from lsv_calibrator.core.model import CalibrationProblem, Grid3Field, OptionQuote
from lsv_calibrator.core.parser import FLOAT_FORMAT, write_quotes

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
QUOTES_FILE = "quotes.csv"
RESULT_FILE = "result.json"
TRACE_FILE = "trace.csv"
REPRICING_FILE = "repricing.csv"
SIGMA2_FILE = "sigma2.field.txt"
ETA_FILE = "eta.field.txt"
PHI_FILE = "phi.field.txt"
DENSITY_FILE = "density.field.txt"
BUNDLE_FILES = (
    CONFIG_FILE,
    QUOTES_FILE,
    RESULT_FILE,
    TRACE_FILE,
    REPRICING_FILE,
    SIGMA2_FILE,
    ETA_FILE,
)


@dataclass(frozen=True)
class ReportConfig:
    """Which plot data to emit."""

    slice_times: Tuple[float, ...] = (0.0, 0.5, 1.0)
    smile_prefix: str = "smile"


@dataclass(frozen=True)
class BundleContents:
    root: Path
    config_text: str
    summary: dict
    trace: pd.DataFrame
    repricing: pd.DataFrame
    sigma2: Grid3Field
    eta: Grid3Field


def repricing_frame(rows: Sequence[RepricingRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "index": [row.index for row in rows],
            "kind": [row.kind for row in rows],
            "strike": [row.strike for row in rows],
            "log_strike": [float(np.log(row.strike)) if row.strike > 0 else np.nan for row in rows],
            "maturity": [row.maturity for row in rows],
            "market_price": [row.market_price for row in rows],
            "model_price": [row.model_price for row in rows],
            "error": [row.error for row in rows],
            "input_iv": [row.input_iv for row in rows],
            "model_iv": [row.model_iv for row in rows],
            "iv_error": [row.iv_error for row in rows],
        }
    )


def trace_frame(trace: Sequence[IterationRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "iteration": [record.iteration for record in trace],
            "objective": [record.objective for record in trace],
            "grad_norm": [record.grad_norm for record in trace],
            "phase": [record.phase for record in trace],
        }
    )


def price_frame(
    quotes: Sequence[OptionQuote], backward: np.ndarray, forward: np.ndarray
) -> pd.DataFrame:
    """Prices of a quote list by both routes and their gap."""
    return pd.DataFrame(
        {
            "kind": [quote.kind.value for quote in quotes],
            "strike": [quote.strike for quote in quotes],
            "maturity": [quote.maturity for quote in quotes],
            "quoted_price": [quote.price for quote in quotes],
            "backward_price": np.asarray(backward, dtype=float),
            "forward_price": np.asarray(forward, dtype=float),
            "gap": np.abs(np.asarray(backward) - np.asarray(forward)),
        }
    )


def _to_csv(frame: pd.DataFrame, file_path: Path) -> Path:
    frame.to_csv(file_path, index=False, float_format=FLOAT_FORMAT, na_rep="")
    return file_path


class BundleReporter:
    """Writes and reads result bundles and derives plot data from them."""

    def __init__(self, config: Optional[ReportConfig] = None):
        """Initialize the reporter.

        Args:
            config: Report configuration. If None, uses defaults.
        """
        self.config = config or ReportConfig()

    def summary(self, result: CalibrationResult, problem: CalibrationProblem) -> dict:
        ledger = result.density
        return {
            "converged": result.converged,
            "message": result.message,
            "iterations": result.iterations,
            "quotes": problem.m,
            "epsilon": problem.epsilon,
            "objective": result.objective,
            "grad_norm": result.grad_norm,
            "lambda_star": [float(x) for x in result.lambda_star.values],
            "model_prices": [float(x) for x in result.model_prices],
            "final_mass": float(ledger.masses[-1]),
            "min_negative_mass": float(ledger.negative_masses.min()),
            "density_flags": list(ledger.flags),
            "spot_index": list(problem.grid.spot_index),
            "snap_displacement": list(problem.grid.snap_displacement),
        }

    def write_bundle(
        self,
        out_dir: Path,
        result: CalibrationResult,
        problem: CalibrationProblem,
        config_text: str,
        dump_fields: bool = False,
    ) -> List[Path]:
        """Write the bundle, creating ``out_dir`` if needed.

        Returns:
            Paths written, in a fixed order.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        config_path = out_dir / CONFIG_FILE
        config_path.write_text(config_text, encoding="utf-8")
        written.append(config_path)
        written.append(write_quotes(out_dir / QUOTES_FILE, problem.quotes))
        result_path = out_dir / RESULT_FILE
        result_path.write_text(
            json.dumps(self.summary(result, problem), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        written.append(result_path)
        written.append(_to_csv(trace_frame(result.trace), out_dir / TRACE_FILE))
        written.append(_to_csv(repricing_frame(result.repricing), out_dir / REPRICING_FILE))
        written.append(write_field(out_dir / SIGMA2_FILE, result.sigma2))
        written.append(write_field(out_dir / ETA_FILE, result.eta))
        if dump_fields:
            if result.hjb.phi_path is not None:
                written.append(write_field(out_dir / PHI_FILE, result.hjb.phi_path))
            else:
                logger.warning("phi path not kept by the HJB solver; skipping %s", PHI_FILE)
            written.append(write_field(out_dir / DENSITY_FILE, result.density.density))
        logger.info("Wrote result bundle to %s", out_dir)
        return written

    def read_bundle(self, bundle_dir: Path) -> BundleContents:
        """Load a bundle.

        Raises:
            InputError: Missing directory or members, listing every missing one.
        """
        bundle_dir = Path(bundle_dir)
        if not bundle_dir.is_dir():
            raise InputError(f"bundle directory not found: {bundle_dir}")
        missing = [name for name in BUNDLE_FILES if not (bundle_dir / name).is_file()]
        if missing:
            raise InputError(f"{bundle_dir}: bundle incomplete, missing {', '.join(missing)}")
        try:
            summary = json.loads((bundle_dir / RESULT_FILE).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{bundle_dir / RESULT_FILE}: {exc}") from None
        return BundleContents(
            root=bundle_dir,
            config_text=(bundle_dir / CONFIG_FILE).read_text(encoding="utf-8"),
            summary=summary,
            trace=pd.read_csv(bundle_dir / TRACE_FILE),
            repricing=pd.read_csv(bundle_dir / REPRICING_FILE, keep_default_na=True),
            sigma2=read_field(bundle_dir / SIGMA2_FILE),
            eta=read_field(bundle_dir / ETA_FILE),
        )

    def smile_tables(self, repricing: pd.DataFrame) -> Dict[float, pd.DataFrame]:
        """Input against model implied vols, one table per maturity."""
        vanilla = repricing[repricing["kind"].isin(["call", "put"])]
        tables = {}
        for maturity, rows in vanilla.groupby("maturity", sort=True):
            tables[float(maturity)] = rows.sort_values("strike", kind="stable")[
                ["strike", "log_strike", "input_iv", "model_iv", "iv_error"]
            ].reset_index(drop=True)
        return tables

    def surface_slice(self, field: Grid3Field, t: float) -> pd.DataFrame:
        """Long-format (t, z, v, value) slice nearest to time ``t``."""
        k = field.tgrid.nearest_step(t)
        k = min(k, field.values.shape[0] - 1)
        z, v = np.meshgrid(field.grid.z, field.grid.v, indexing="ij")
        return pd.DataFrame(
            {
                "t": np.full(z.size, k * field.tgrid.dt),
                "z": z.ravel(),
                "v": v.ravel(),
                "value": field.values[k].ravel(),
            }
        )

    def write_report(self, bundle_dir: Path, out_dir: Optional[Path] = None) -> List[Path]:
        """Per-maturity smile files and sigma^2 / eta slice files."""
        contents = self.read_bundle(bundle_dir)
        out_dir = Path(out_dir) if out_dir is not None else contents.root / "report"
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for maturity, table in self.smile_tables(contents.repricing).items():
            name = f"{self.config.smile_prefix}_T{maturity:.4f}.csv"
            written.append(_to_csv(table, out_dir / name))
        for field in (contents.sigma2, contents.eta):
            for t in self.config.slice_times:
                name = f"{field.tag.value}_t{t:.4f}.csv"
                written.append(_to_csv(self.surface_slice(field, t), out_dir / name))
        logger.info("Wrote %d report files to %s", len(written), out_dir)
        return written
