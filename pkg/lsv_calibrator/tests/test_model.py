import math

import numpy as np
import pytest

from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.model import (
    DomainSpec,
    FieldTag,
    Grid3Field,
    HestonParams,
    OptionQuote,
    PayoffKind,
    SpotState,
    TimeGrid,
    build_grids,
    constant_payoff,
    payoff_eval,
    snap_maturities,
    validate_problem,
)
from lsv_calibrator.tests.conftest import call, put


def test_default_grids_match_experiment_layout(spot):
    grid, tgrid = build_grids(DomainSpec(), spot)
    assert grid.shape == (51, 51)
    assert grid.z_min == pytest.approx(math.log(100) - 0.8, abs=1e-12)
    assert grid.z_max == pytest.approx(math.log(100) + 0.8, abs=1e-12)
    assert grid.v_min == 0.0
    assert grid.v_max == pytest.approx(0.5, abs=1e-12)
    assert grid.dv == pytest.approx(0.01, abs=1e-14)
    assert tgrid.times.size == 101
    assert tgrid.dt == pytest.approx(0.01)


def test_spot_lies_exactly_on_a_node(spot):
    grid, _ = build_grids(DomainSpec(), spot)
    i0, j0 = grid.spot_index
    assert j0 == 4
    assert grid.z[i0] == spot.z0
    assert grid.v[j0] == spot.v0


def test_off_grid_spot_is_snapped_by_shifting_bounds():
    spot = SpotState(z0=math.log(100), v0=0.043)
    spec = DomainSpec(z_min=4.0, z_max=5.2, n_z=25)
    grid, _ = build_grids(spec, spot)
    i0, j0 = grid.spot_index
    assert grid.z[i0] == spot.z0
    assert grid.v[j0] == spot.v0
    assert np.allclose(np.diff(grid.z), 0.05)
    assert grid.snap_displacement[0] != 0.0


def test_node_count_below_minimum(spot):
    with pytest.raises(InputError, match="node count below minimum"):
        build_grids(DomainSpec(n_z=2), spot)


def test_spot_outside_domain(spot):
    with pytest.raises(InputError, match="spot outside domain"):
        build_grids(DomainSpec(z_min=5.0, z_max=6.0), spot)


def test_step_index():
    tgrid = TimeGrid(horizon=1.0, n_steps=100)
    assert tgrid.step_index(0.25) == 25
    assert tgrid.step_index(0.2) == 20
    assert tgrid.step_index(0.205) is None
    assert tgrid.step_index(1.5) is None


def test_validate_problem_flags_off_grid_maturity(make_problem):
    problem = make_problem([call(100.0, 0.25), call(100.0, 0.205)])
    report = validate_problem(problem)
    assert not report.ok
    assert len(report.violations) == 1
    assert "maturity not on time grid" in report.violations[0]
    with pytest.raises(InputError):
        report.raise_if_invalid()


def test_validate_problem_flags_correlation(make_problem):
    problem = make_problem([call(100.0, 0.25)], heston=HestonParams(eta_bar=-1.2))
    violations = validate_problem(problem).violations
    assert any("correlation outside [-1,1]" in item for item in violations)


def test_validate_problem_empty_quotes(make_problem):
    assert "no quotes" in validate_problem(make_problem([])).violations
    assert validate_problem(make_problem([]), allow_empty=True).ok


def test_call_payoff_is_discounted():
    quote = call(100.0, 0.2)
    value = payoff_eval(quote, np.log(110.0))
    assert float(value) == pytest.approx(math.exp(-0.01) * 10.0, rel=1e-14)
    assert float(value) == pytest.approx(9.9005, abs=1e-4)
    assert float(payoff_eval(quote, np.log(90.0))) == 0.0


def test_put_payoff_is_discounted():
    value = float(payoff_eval(put(100.0, 1.0), np.log(90.0)))
    assert value == pytest.approx(9.5123, abs=1e-4)


def test_payoff_put_call_parity():
    z = np.linspace(4.0, 5.2, 31)
    gap = payoff_eval(call(100.0, 0.6), z) - payoff_eval(put(100.0, 0.6), z)
    np.testing.assert_allclose(gap, math.exp(-0.03) * (np.exp(z) - 100.0), atol=1e-12)


def test_custom_payoff_interpolates_and_holds_flat():
    quote = OptionQuote(
        kind=PayoffKind.CUSTOM,
        strike=0.0,
        maturity=0.5,
        price=0.0,
        table=((5.0, 1.0), (4.0, 0.0)),
    )
    values = payoff_eval(quote, np.array([3.0, 4.5, 6.0]))
    np.testing.assert_allclose(values, [0.0, 0.5, 1.0])
    assert np.all(payoff_eval(constant_payoff(1.0, 0.5), np.linspace(4, 5, 5)) == 1.0)


def test_snap_maturities_moves_to_nearest_node():
    tgrid = TimeGrid(horizon=1.0, n_steps=100)
    snapped = snap_maturities([call(100.0, 0.2049), call(100.0, 0.3)], tgrid)
    assert tgrid.step_index(snapped[0].maturity) == 20
    assert tgrid.step_index(snapped[1].maturity) == 30


def test_grid3field_rejects_wrong_shape(make_problem):
    problem = make_problem()
    with pytest.raises(InputError):
        Grid3Field(
            values=np.zeros((problem.tgrid.n_steps + 1,) + problem.grid.shape),
            tag=FieldTag.SIGMA2,
            grid=problem.grid,
            tgrid=problem.tgrid,
        )
    field = Grid3Field(
        values=np.ones((problem.tgrid.n_steps + 1,) + problem.grid.shape),
        tag=FieldTag.DENSITY,
        grid=problem.grid,
        tgrid=problem.tgrid,
    )
    assert not field.values.flags.writeable


def test_density_violations_report_mass(make_problem):
    problem = make_problem()
    values = np.zeros((problem.tgrid.n_steps + 1,) + problem.grid.shape)
    values[:, 0, 0] = 1.0 / problem.grid.cell_area
    values[3, 1, 1] = -0.5 / problem.grid.cell_area
    field = Grid3Field(
        values=values, tag=FieldTag.DENSITY, grid=problem.grid, tgrid=problem.tgrid
    )
    found = field.density_violations(mass_tol=1e-3)
    assert len(found) == 2
    assert all(item.startswith("slice 3") for item in found)
