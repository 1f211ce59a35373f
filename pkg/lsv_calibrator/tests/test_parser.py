import math

import numpy as np
import pytest

from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.fields import read_field, write_field
from lsv_calibrator.core.model import FieldTag, Grid3Field, OptionQuote, PayoffKind
from lsv_calibrator.core.parser import (
    QuoteFileConfig,
    QuoteReader,
    format_table,
    parse_table,
    write_quotes,
)
from lsv_calibrator.tests.conftest import call, put


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_minimal_file_applies_defaults(tmp_path):
    path = write_text(
        tmp_path / "quotes.csv",
        "strike, maturity, price\n100, 0.2, 4.5\n110, 0.4, 2.25\n",
    )
    quotes = QuoteReader(QuoteFileConfig(default_rate=0.03)).read_file(path)
    assert len(quotes) == 2
    assert quotes[0] == OptionQuote(
        kind=PayoffKind.CALL, strike=100.0, maturity=0.2, price=4.5, rate=0.03
    )
    assert quotes[1].strike == 110.0


def test_log_strike_column_sets_strike(tmp_path):
    path = write_text(
        tmp_path / "quotes.csv",
        "kind,log_strike,maturity,price,rate\nput,4.6,0.6,3.0,0.05\n",
    )
    (quote,) = QuoteReader().read_file(path)
    assert quote.kind is PayoffKind.PUT
    assert quote.strike == pytest.approx(math.exp(4.6), rel=1e-15)


def test_disagreeing_strike_columns_are_rejected(tmp_path):
    path = write_text(
        tmp_path / "quotes.csv",
        "strike,log_strike,maturity,price\n100,4.7,0.6,3.0\n",
    )
    with pytest.raises(InputError, match="line 2"):
        QuoteReader().read_file(path)


def test_bad_row_names_its_line(tmp_path):
    path = write_text(
        tmp_path / "quotes.csv",
        "kind,strike,maturity,price\ncall,100,0.2,4.5\ncall,100,0.4,abc\n",
    )
    with pytest.raises(InputError, match="line 3: price 'abc' is not a number"):
        QuoteReader().read_file(path)


@pytest.mark.parametrize(
    "row,message",
    [
        ("straddle,100,0.2,4.5", "unknown payoff kind"),
        ("call,,0.2,4.5", "needs strike or log_strike"),
        ("call,100,,4.5", "maturity and price are required"),
        ("call,100,0.2,inf", "must be finite"),
    ],
)
def test_malformed_rows(tmp_path, row, message):
    path = write_text(tmp_path / "quotes.csv", f"kind,strike,maturity,price\n{row}\n")
    with pytest.raises(InputError, match=message):
        QuoteReader().read_file(path)


def test_header_must_name_maturity_and_price(tmp_path):
    path = write_text(tmp_path / "quotes.csv", "strike,cost\n100,4\n")
    with pytest.raises(InputError, match="header"):
        QuoteReader().read_file(path)


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="not found"):
        QuoteReader().read_file(tmp_path / "absent.csv")


def test_custom_payoff_table(tmp_path):
    path = write_text(
        tmp_path / "quotes.csv",
        'kind,maturity,price,table\ncustom,0.5,0.4,"4.5:0;4.6:0.5;4.7:1"\n',
    )
    (quote,) = QuoteReader().read_file(path)
    assert quote.kind is PayoffKind.CUSTOM
    assert quote.table == ((4.5, 0.0), (4.6, 0.5), (4.7, 1.0))
    assert parse_table(format_table(quote.table)) == quote.table
    with pytest.raises(ValueError):
        parse_table("4.5=0")


def test_written_quotes_read_back_exactly(tmp_path):
    quotes = (
        call(math.exp(4.3172), 0.2, price=12.345678901234567),
        put(100.0, 0.6, price=1.0 / 3.0),
    )
    path = write_quotes(tmp_path / "out.csv", quotes, input_ivs=[0.2396, 0.25])
    assert QuoteReader().read_file(path) == quotes
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "kind,strike,log_strike,maturity,price,rate,input_iv,table"


@pytest.fixture
def field(make_problem):
    problem = make_problem()
    rng = np.random.default_rng(5)
    values = rng.normal(size=(problem.tgrid.n_steps,) + problem.grid.shape)
    return Grid3Field(values=values, tag=FieldTag.SIGMA2, grid=problem.grid, tgrid=problem.tgrid)


def test_field_file_reads_back_onto_the_same_grid(tmp_path, field):
    path = write_field(tmp_path / "sigma2.txt", field)
    loaded = read_field(path)
    assert loaded.tag is FieldTag.SIGMA2
    np.testing.assert_array_equal(loaded.values, field.values)
    np.testing.assert_array_equal(loaded.grid.z, field.grid.z)
    np.testing.assert_array_equal(loaded.grid.v, field.grid.v)
    assert loaded.grid.spot_index == field.grid.spot_index
    assert loaded.tgrid == field.tgrid


def test_truncated_field_file_is_rejected(tmp_path, field):
    path = write_field(tmp_path / "sigma2.txt", field)
    lines = path.read_text(encoding="utf-8").splitlines()
    write_text(path, "\n".join(lines[:-1]) + "\n")
    with pytest.raises(InputError, match="do not match header"):
        read_field(path)


def test_foreign_file_is_not_a_field(tmp_path):
    path = write_text(tmp_path / "x.txt", '# {"format": "other"}\n1 2\n')
    with pytest.raises(InputError, match="not a field file"):
        read_field(path)
    write_text(path, "1 2\n3 4\n")
    with pytest.raises(InputError, match="missing field header"):
        read_field(path)
