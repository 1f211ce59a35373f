import math
from dataclasses import replace

import numpy as np
import pytest

from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.heston import QuoteSetSpec, heston_call_price, implied_vol
from lsv_calibrator.core.hjb import HjbConfig
from lsv_calibrator.core.model import (
    DomainSpec,
    FieldTag,
    Grid3Field,
    PayoffKind,
    SpotState,
    constant_payoff,
)
from lsv_calibrator.core.operators import TimeScheme
from lsv_calibrator.core.pricer import ForwardPricer, PricerConfig
from lsv_calibrator.tests.conftest import (
    DATA_ROW,
    LSV_ROW,
    SMALL_DOMAIN,
    TABLE_INPUT_IV,
    call,
    put,
    reference_sigma2,
)


@pytest.fixture
def pricer():
    return ForwardPricer()


@pytest.fixture
def problem(make_problem):
    quotes = [
        call(100.0, 0.25),
        call(110.0, 0.25),
        put(90.0, 0.25),
        call(100.0, 0.5),
        put(105.0, 0.5),
    ]
    return make_problem(quotes)


def test_constant_claim_prices_to_one(pricer, make_problem):
    problem = make_problem([constant_payoff(1.0, 0.5)])
    sigma2 = reference_sigma2(problem)
    assert pricer.price_backward(problem, sigma2, problem.quotes[0]) == pytest.approx(
        1.0, abs=1e-12
    )
    path = pricer.solve_fokker_planck(problem, sigma2)
    assert pricer.prices_from_density(path, problem.quotes)[0] == pytest.approx(1.0, abs=1e-12)


def test_forward_and_backward_routes_agree(pricer, problem):
    sigma2 = reference_sigma2(problem, factor=1.1)
    backward = pricer.price_backward_many(problem, sigma2, problem.quotes)
    forward = pricer.prices_from_density(
        pricer.solve_fokker_planck(problem, sigma2), problem.quotes
    )
    np.testing.assert_allclose(forward, backward, rtol=0, atol=1e-9)


def test_density_ledger(pricer, problem):
    path = pricer.solve_fokker_planck(problem, reference_sigma2(problem))
    assert path.density.tag is FieldTag.DENSITY
    assert path.density.values.shape == (problem.tgrid.n_steps + 1,) + problem.grid.shape
    np.testing.assert_allclose(path.masses, 1.0, atol=1e-10)
    assert path.density.values[0][problem.grid.spot_index] == pytest.approx(
        1.0 / problem.grid.cell_area
    )
    assert not any("mass drift" in flag for flag in path.flags)
    assert not any("outside" in item for item in path.density.density_violations(1e-3))


def test_discounted_spot_is_a_martingale(pricer, problem):
    path = pricer.solve_fokker_planck(problem, reference_sigma2(problem))
    grid, tgrid = problem.grid, problem.tgrid
    spot_weights = np.exp(grid.z) * grid.cell_area
    for k in range(0, tgrid.n_steps + 1, 5):
        mean = float(path.density.values[k].sum(axis=1) @ spot_weights)
        forward = 100.0 * math.exp(0.05 * tgrid.times[k])
        assert mean == pytest.approx(forward, rel=2e-3)


def test_put_call_parity_under_the_model(pricer, make_problem):
    problem = make_problem([call(100.0, 0.5), put(100.0, 0.5)])
    prices = pricer.price_backward_many(problem, reference_sigma2(problem), problem.quotes)
    assert prices[0] - prices[1] == pytest.approx(100.0 - 100.0 * math.exp(-0.025), rel=1e-3)


def test_parallel_backward_prices_keep_quote_order(problem):
    sigma2 = reference_sigma2(problem)
    serial = ForwardPricer().price_backward_many(problem, sigma2, problem.quotes)
    threaded = ForwardPricer(PricerConfig(workers=3)).price_backward_many(
        problem, sigma2, problem.quotes
    )
    np.testing.assert_array_equal(serial, threaded)


def test_higher_variance_raises_option_prices(pricer, make_problem):
    problem = make_problem([call(100.0, 0.5)])
    low = pricer.price_backward(problem, reference_sigma2(problem), problem.quotes[0])
    high = pricer.price_backward(problem, reference_sigma2(problem, 1.5), problem.quotes[0])
    assert high > low > 0


def test_ledger_flags_do_not_stop_the_solve(make_problem):
    problem = make_problem()
    pricer = ForwardPricer(PricerConfig(mass_tol=1e-3, negative_tol=-1.0))
    path = pricer.solve_fokker_planck(problem, reference_sigma2(problem))
    assert not path.ok
    assert any("negative mass" in flag for flag in path.flags)
    assert path.masses.shape == (problem.tgrid.n_steps + 1,)


def test_rejects_wrong_field(pricer, problem):
    sigma2 = reference_sigma2(problem)
    density = Grid3Field(
        values=np.ones((problem.tgrid.n_steps + 1,) + problem.grid.shape),
        tag=FieldTag.DENSITY,
        grid=problem.grid,
        tgrid=problem.tgrid,
    )
    with pytest.raises(InputError, match="sigma2"):
        pricer.price_backward(problem, density, problem.quotes[0])
    with pytest.raises(InputError, match="not on time grid"):
        pricer.price_backward(problem, sigma2, call(100.0, 0.26))


@pytest.mark.slow
def test_reference_model_matches_analytic_heston(make_problem):
    """sigma^2 = V on the full grid reproduces the analytic Heston vol."""
    quote = call(100.0, 0.2)
    problem = make_problem([quote], heston=DATA_ROW, domain=DomainSpec())
    pde = ForwardPricer().price_backward(problem, reference_sigma2(problem), quote)
    analytic = heston_call_price(DATA_ROW, problem.spot, 100.0, 0.2)
    pde_iv = implied_vol(pde, 100.0, 100.0, 0.2, 0.05)
    analytic_iv = implied_vol(analytic, 100.0, 100.0, 0.2, 0.05)
    assert pde_iv == pytest.approx(analytic_iv, abs=5e-3)


MONOTONE = HjbConfig(scheme=TimeScheme.MONOTONE)
SMALL_QUOTE_SET = QuoteSetSpec(
    log_strike_min=4.45, log_strike_max=4.75, n_strikes=5, maturities=(0.25, 0.5)
)


@pytest.mark.parametrize("hjb", [MONOTONE, HjbConfig(rannacher_steps=2)])
def test_routes_agree_under_every_scheme(problem, hjb):
    pricer = ForwardPricer(hjb_config=hjb)
    sigma2 = reference_sigma2(problem, factor=1.1)
    backward = pricer.price_backward_many(problem, sigma2, problem.quotes)
    forward = pricer.prices_from_density(
        pricer.solve_fokker_planck(problem, sigma2), problem.quotes
    )
    np.testing.assert_allclose(forward, backward, rtol=0, atol=1e-9)


def test_monotone_density_is_nonnegative(make_problem):
    problem = make_problem([call(100.0, 0.5)], heston=DATA_ROW)
    path = ForwardPricer(hjb_config=MONOTONE).solve_fokker_planck(
        problem, reference_sigma2(problem)
    )
    assert path.ok, path.flags
    assert path.density.values.min() >= -1e-12
    np.testing.assert_allclose(path.masses, 1.0, atol=1e-12)


def test_generated_quotes_are_ordered_and_priced(pricer, spot):
    quotes, ivs = pricer.generate_quotes(LSV_ROW, spot, SMALL_QUOTE_SET, SMALL_DOMAIN)
    assert len(quotes) == 10 and ivs.shape == (10,)
    keys = [(quote.maturity, quote.strike) for quote in quotes]
    assert keys == sorted(keys)
    assert all(quote.kind is PayoffKind.CALL and quote.price > 0 for quote in quotes)
    assert np.all((ivs > 0.1) & (ivs < 0.4))


def test_generated_puts_carry_call_vols(pricer, spot):
    _, call_ivs = pricer.generate_quotes(DATA_ROW, spot, SMALL_QUOTE_SET, SMALL_DOMAIN)
    puts = replace(SMALL_QUOTE_SET, kind=PayoffKind.PUT)
    quotes, put_ivs = pricer.generate_quotes(DATA_ROW, spot, puts, SMALL_DOMAIN)
    assert all(quote.kind is PayoffKind.PUT for quote in quotes)
    np.testing.assert_allclose(put_ivs, call_ivs, atol=5e-3)


def test_generation_rejects_maturities_past_the_horizon(pricer, spot):
    with pytest.raises(InputError):
        pricer.generate_quotes(LSV_ROW, spot, QuoteSetSpec(), SMALL_DOMAIN)


@pytest.mark.slow
@pytest.mark.parametrize("row", [LSV_ROW, DATA_ROW])
def test_monotone_density_is_nonnegative_on_full_grids(make_problem, row):
    problem = make_problem([call(100.0, 1.0)], heston=row, domain=DomainSpec())
    path = ForwardPricer(hjb_config=MONOTONE).solve_fokker_planck(
        problem, reference_sigma2(problem)
    )
    assert path.ok, path.flags
    assert path.density.values.min() >= -1e-12
    np.testing.assert_allclose(path.masses, 1.0, atol=1e-12)


@pytest.mark.slow
def test_forward_prices_keep_put_call_parity(pricer, make_problem):
    quotes = [call(100.0, 0.5), put(100.0, 0.5), call(40.0, 0.5)]
    problem = make_problem(quotes, domain=DomainSpec())
    path = pricer.solve_fokker_planck(problem, reference_sigma2(problem))
    call_price, put_price, deep = pricer.prices_from_density(path, problem.quotes)
    discount = math.exp(-0.025)
    assert call_price - put_price == pytest.approx(100.0 - 100.0 * discount, abs=1e-3)
    assert deep == pytest.approx(100.0 - 40.0 * discount, rel=1e-3)


@pytest.mark.slow
def test_generated_data_row_reproduces_table_vols(pricer):
    quotes, ivs = pricer.generate_quotes(DATA_ROW, SpotState(), QuoteSetSpec(), DomainSpec())
    assert len(quotes) == 65
    np.testing.assert_allclose(
        ivs.reshape(5, 13)[:, ::3], np.array(TABLE_INPUT_IV), atol=1e-3
    )
