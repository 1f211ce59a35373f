"""Quote file reading and writing.

Quote files are comma-separated text with a header row. Columns:

    kind        call | put | custom (default call)
    strike      strike in price units          } one of the two is required
    log_strike  strike as a log-price          } for calls and puts
    maturity    years
    price       discounted market price
    rate        discount rate of the payoff (default: the configured rate)
    input_iv    implied vol of the price (written by ``generate``, ignored on read)
    table       custom payoffs only: "z:value;z:value;..."
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.model import OptionQuote, PayoffKind

logger = logging.getLogger(__name__)

COLUMNS = ("kind", "strike", "log_strike", "maturity", "price", "rate", "input_iv", "table")
FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class QuoteFileConfig:
    """Defaults applied while reading quote files."""

    default_rate: float = 0.05
    default_kind: PayoffKind = PayoffKind.CALL


def format_table(table: Sequence[Tuple[float, float]]) -> str:
    return ";".join(f"{z!r}:{value!r}" for z, value in table)


def parse_table(text: str) -> Tuple[Tuple[float, float], ...]:
    """Parse "z:value;z:value" into pairs."""
    pairs = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        z_text, sep, value_text = item.partition(":")
        if not sep:
            raise ValueError(f"table entry {item!r} is not z:value")
        pairs.append((float(z_text), float(value_text)))
    if not pairs:
        raise ValueError("empty payoff table")
    return tuple(pairs)


class QuoteReader:
    """Reads quote files into OptionQuote tuples."""

    def __init__(self, config: Optional[QuoteFileConfig] = None):
        """Initialize the reader.

        Args:
            config: Reading defaults. If None, uses defaults.
        """
        self.config = config or QuoteFileConfig()

    def _number(self, row: pd.Series, column: str, line: int) -> Optional[float]:
        text = str(row.get(column, "")).strip()
        if not text:
            return None
        try:
            value = float(text)
        except ValueError:
            raise InputError(f"line {line}: {column} {text!r} is not a number") from None
        if not math.isfinite(value):
            raise InputError(f"line {line}: {column} must be finite, got {text}")
        return value

    def _quote(self, row: pd.Series, line: int) -> OptionQuote:
        kind_text = str(row.get("kind", "")).strip().lower()
        try:
            kind = PayoffKind(kind_text) if kind_text else self.config.default_kind
        except ValueError:
            raise InputError(f"line {line}: unknown payoff kind {kind_text!r}") from None

        maturity = self._number(row, "maturity", line)
        price = self._number(row, "price", line)
        if maturity is None or price is None:
            raise InputError(f"line {line}: maturity and price are required")
        rate = self._number(row, "rate", line)
        rate = self.config.default_rate if rate is None else rate

        strike = self._number(row, "strike", line)
        log_strike = self._number(row, "log_strike", line)
        if strike is None and log_strike is not None:
            strike = math.exp(log_strike)
        elif strike is not None and log_strike is not None:
            if strike <= 0 or abs(math.log(strike) - log_strike) > 1e-9:
                raise InputError(
                    f"line {line}: strike {strike} and log_strike {log_strike} disagree"
                )

        table: Tuple[Tuple[float, float], ...] = ()
        if kind is PayoffKind.CUSTOM:
            try:
                table = parse_table(str(row.get("table", "")))
            except ValueError as exc:
                raise InputError(f"line {line}: {exc}") from None
            strike = 0.0 if strike is None else strike
        elif strike is None:
            raise InputError(f"line {line}: {kind.value} needs strike or log_strike")

        return OptionQuote(
            kind=kind, strike=strike, maturity=maturity, price=price, rate=rate, table=table
        )

    def read_frame(self, frame: pd.DataFrame, source: str = "<frame>") -> Tuple[OptionQuote, ...]:
        """Convert a string-typed frame; line numbers count the header as 1."""
        unknown = sorted(set(frame.columns) - set(COLUMNS))
        if unknown:
            logger.warning("%s: ignoring unknown columns %s", source, unknown)
        if "maturity" not in frame.columns or "price" not in frame.columns:
            raise InputError(f"{source}: header must name maturity and price")
        quotes: List[OptionQuote] = []
        for position, (_, row) in enumerate(frame.iterrows()):
            try:
                quotes.append(self._quote(row, position + 2))
            except InputError as exc:
                raise InputError(f"{source}, {exc}") from None
        return tuple(quotes)

    def read_file(self, file_path: Path) -> Tuple[OptionQuote, ...]:
        """Read a quote file.

        Raises:
            InputError: Unreadable file or malformed row, naming the line.
        """
        file_path = Path(file_path)
        try:
            frame = pd.read_csv(
                file_path, dtype=str, keep_default_na=False, skipinitialspace=True
            )
        except FileNotFoundError:
            raise InputError(f"quote file not found: {file_path}") from None
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise InputError(f"{file_path}: {exc}") from None
        frame.columns = [str(column).strip().lower() for column in frame.columns]
        quotes = self.read_frame(frame, str(file_path))
        logger.info("Read %d quotes from %s", len(quotes), file_path)
        return quotes


def quotes_frame(
    quotes: Sequence[OptionQuote], input_ivs: Optional[Sequence[float]] = None
) -> pd.DataFrame:
    """Quotes as a frame with the file columns."""
    ivs = list(input_ivs) if input_ivs is not None else [math.nan] * len(quotes)
    return pd.DataFrame(
        {
            "kind": [quote.kind.value for quote in quotes],
            "strike": [quote.strike for quote in quotes],
            "log_strike": [quote.log_strike for quote in quotes],
            "maturity": [quote.maturity for quote in quotes],
            "price": [quote.price for quote in quotes],
            "rate": [quote.rate for quote in quotes],
            "input_iv": np.asarray(ivs, dtype=float),
            "table": [format_table(quote.table) for quote in quotes],
        },
        columns=list(COLUMNS),
    )


def write_quotes(
    file_path: Path,
    quotes: Sequence[OptionQuote],
    input_ivs: Optional[Sequence[float]] = None,
) -> Path:
    """Write a quote file readable by QuoteReader."""
    file_path = Path(file_path)
    quotes_frame(quotes, input_ivs).to_csv(
        file_path, index=False, float_format=FLOAT_FORMAT, na_rep=""
    )
    return file_path
