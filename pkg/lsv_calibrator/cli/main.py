"""Command-line front end.

    lsv-calibrate [-v] [--threads N] generate    [--config C] [--out quotes.csv]
    lsv-calibrate [-v] [--threads N] calibrate   [--config C] --quotes Q --out DIR
                                                 [--snap-maturities] [--dump-fields]
    lsv-calibrate [-v] [--threads N] price       --bundle DIR --quotes Q --out P
                                                 [--config C]
    lsv-calibrate [-v]               report      --bundle DIR [--out DIR]
    lsv-calibrate                    show-config [--config C]

Exit codes: 0 success, 2 calibration not converged, 3 invalid input,
4 numerical failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from lsv_calibrator.config import (
    QuoteGenerator,
    RunConfig,
    build_problem,
    dump_config,
    load_config,
    parse_config,
)
from lsv_calibrator.core.calibrator import Calibrator
from lsv_calibrator.core.errors import InputError, NumericalError
from lsv_calibrator.core.fields import read_field
from lsv_calibrator.core.heston import generate_quotes
from lsv_calibrator.core.model import CalibrationProblem, Grid3Field, validate_problem
from lsv_calibrator.core.parser import QuoteReader, write_quotes
from lsv_calibrator.core.pricer import ForwardPricer
from lsv_calibrator.core.reporter import (
    CONFIG_FILE,
    SIGMA2_FILE,
    BundleReporter,
    price_frame,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4
THREADS_ENV = "LSV_THREADS"


def resolve_workers(flag: Optional[int], config: RunConfig) -> int:
    """Thread count: command-line flag, then LSV_THREADS, then the config."""
    if flag is not None:
        workers = flag
    elif os.environ.get(THREADS_ENV):
        try:
            workers = int(os.environ[THREADS_ENV])
        except ValueError:
            raise InputError(
                f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}"
            ) from None
    else:
        workers = config.pricer.workers
    if workers < 1:
        raise InputError(f"thread count must be at least 1, got {workers}")
    return workers


def _config(path: Optional[Path]) -> RunConfig:
    return load_config(path) if path is not None else RunConfig()


def _check_field_grid(field: Grid3Field, problem: CalibrationProblem) -> None:
    same_space = (
        field.grid.shape == problem.grid.shape
        and np.allclose(field.grid.z, problem.grid.z, rtol=0.0, atol=1e-12)
        and np.allclose(field.grid.v, problem.grid.v, rtol=0.0, atol=1e-12)
    )
    same_time = (
        field.tgrid.n_steps == problem.tgrid.n_steps
        and abs(field.tgrid.horizon - problem.tgrid.horizon) <= 1e-12
    )
    if not (same_space and same_time):
        raise InputError(
            f"dimension mismatch: field on {field.grid.shape} x {field.tgrid.n_steps} "
            f"steps, config grids {problem.grid.shape} x {problem.tgrid.n_steps} steps"
        )


def cmd_generate(args: argparse.Namespace) -> int:
    config = _config(args.config)
    if config.quote_generator is QuoteGenerator.ANALYTIC:
        quotes, ivs = generate_quotes(
            config.data_heston, config.spot, config.quote_set, config.quadrature
        )
    else:
        pricer = ForwardPricer(config.pricer, config.hjb)
        quotes, ivs = pricer.generate_quotes(
            config.data_heston, config.spot, config.quote_set, config.domain
        )
    path = write_quotes(args.out, quotes, ivs)
    logger.info("Wrote %d quotes to %s", len(quotes), path)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _config(args.config)
    if args.snap_maturities:
        config = config.model_copy(update={"snap_maturities": True})
    workers = resolve_workers(args.threads, config)
    quotes = QuoteReader(config.quote_file_config()).read_file(args.quotes)
    problem = build_problem(config, quotes)
    validate_problem(problem).raise_if_invalid()

    hjb_config = replace(config.hjb, keep_phi_path=True) if args.dump_fields else config.hjb
    pricer_config = replace(config.pricer, workers=workers)
    calibrator = Calibrator(config.optimizer, hjb_config, pricer_config)
    result = calibrator.calibrate(problem)
    if problem.m:
        backward = calibrator.pricer.price_backward_many(
            problem, result.sigma2, problem.quotes, workers
        )
        logger.info(
            "Backward repricing on %d threads, largest forward/backward gap %.3e",
            workers,
            float(np.max(np.abs(backward - result.model_prices))),
        )
    BundleReporter(config.report).write_bundle(
        args.out, result, problem, dump_config(config), dump_fields=args.dump_fields
    )
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_price(args: argparse.Namespace) -> int:
    bundle = Path(args.bundle)
    if args.config is not None:
        config = load_config(args.config)
    else:
        config_path = bundle / CONFIG_FILE
        if not config_path.is_file():
            raise InputError(f"{bundle}: no {CONFIG_FILE}; pass --config")
        config = parse_config(config_path.read_text(encoding="utf-8"), str(config_path))
    workers = resolve_workers(args.threads, config)

    sigma2 = read_field(bundle / SIGMA2_FILE)
    quotes = QuoteReader(config.quote_file_config()).read_file(args.quotes)
    problem = build_problem(config, quotes)
    validate_problem(problem).raise_if_invalid()
    _check_field_grid(sigma2, problem)

    pricer = ForwardPricer(config.pricer, config.hjb)
    backward = pricer.price_backward_many(problem, sigma2, problem.quotes, workers)
    path = pricer.solve_fokker_planck(problem, sigma2)
    forward = pricer.prices_from_density(path, problem.quotes)
    table = price_frame(problem.quotes, backward, forward)
    table.to_csv(args.out, index=False, float_format="%.17g")
    logger.info(
        "Priced %d quotes, largest forward/backward gap %.3e",
        len(quotes),
        float(table["gap"].max()) if len(table) else 0.0,
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    reporter = BundleReporter()
    bundle = Path(args.bundle)
    config_path = bundle / CONFIG_FILE
    if config_path.is_file():
        config = parse_config(config_path.read_text(encoding="utf-8"), str(config_path))
        reporter = BundleReporter(config.report)
    reporter.write_report(bundle, args.out)
    return EXIT_OK


def cmd_show_config(args: argparse.Namespace) -> int:
    sys.stdout.write(dump_config(_config(args.config)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsv-calibrate",
        description="Calibrate an LSV model to European option prices by dual optimal transport.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None, help=f"overrides {THREADS_ENV}")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="price a synthetic quote set")
    generate.add_argument("--config", type=Path)
    generate.add_argument("--out", type=Path, default=Path("quotes.csv"))
    generate.set_defaults(handler=cmd_generate)

    calibrate = commands.add_parser("calibrate", help="calibrate to a quote file")
    calibrate.add_argument("--config", type=Path)
    calibrate.add_argument("--quotes", type=Path, required=True)
    calibrate.add_argument("--out", type=Path, required=True)
    calibrate.add_argument("--snap-maturities", action="store_true")
    calibrate.add_argument("--dump-fields", action="store_true")
    calibrate.set_defaults(handler=cmd_calibrate)

    price = commands.add_parser("price", help="price quotes under a calibrated surface")
    price.add_argument("--bundle", type=Path, required=True)
    price.add_argument("--quotes", type=Path, required=True)
    price.add_argument("--out", type=Path, default=Path("prices.csv"))
    price.add_argument("--config", type=Path)
    price.set_defaults(handler=cmd_price)

    report = commands.add_parser("report", help="emit smiles and surface slices")
    report.add_argument("--bundle", type=Path, required=True)
    report.add_argument("--out", type=Path)
    report.set_defaults(handler=cmd_report)

    show = commands.add_parser("show-config", help="print the materialized config")
    show.add_argument("--config", type=Path)
    show.set_defaults(handler=cmd_show_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except InputError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
