import math
from dataclasses import replace

import numpy as np
import pytest

from lsv_calibrator.core.errors import InputError, NumericalError
from lsv_calibrator.core.hjb import HjbConfig, HJBSolver, dual_value
from lsv_calibrator.core.model import FieldTag, HestonParams, constant_payoff
from lsv_calibrator.core.operators import PdeCoefficients
from lsv_calibrator.core.pricer import ForwardPricer
from lsv_calibrator.tests.conftest import SMALL_DOMAIN, call, put, reference_sigma2


@pytest.fixture
def solver():
    return HJBSolver()


def test_zero_multipliers_give_reference_model(solver, make_problem):
    problem = make_problem([call(100.0, 0.25, price=5.0), put(95.0, 0.5, price=3.0)])
    solution = solver.solve_hjb(problem, [0.0, 0.0])
    assert np.all(solution.phi0 == 0.0)
    assert solution.phi_at_spot == 0.0
    v = problem.grid.v_mesh
    assert solution.sigma2.tag is FieldTag.SIGMA2
    assert solution.sigma2.values.shape == (problem.tgrid.n_steps,) + problem.grid.shape
    assert np.all(solution.sigma2.values == v)
    assert solver.dual_objective(problem, [0.0, 0.0]) == 0.0


def test_empty_quote_list_is_the_reference_model(solver, make_problem):
    solution = solver.solve_hjb(make_problem([]), [])
    assert np.all(solution.phi0 == 0.0)


def test_sup_step_keeps_reference_on_flat_value(solver, make_problem):
    problem = make_problem()
    v = problem.grid.v_mesh
    sigma2, coeffs = solver.sup_step(np.zeros(problem.grid.shape), problem)
    assert np.all(sigma2 == v)
    np.testing.assert_array_equal(coeffs.diff_z, 0.5 * v)


def test_sup_step_raises_variance_where_value_is_convex(solver, make_problem):
    problem = make_problem()
    grid = problem.grid
    # d_zz - d_z = 2 exp(2 (z - z0)) * 1e-3 > 0 in the interior
    phi = np.broadcast_to(1e-3 * np.exp(2.0 * (grid.z - problem.spot.z0))[:, None], grid.shape)
    sigma2, coeffs = solver.sup_step(np.array(phi), problem)
    v = grid.v_mesh
    assert np.all(sigma2[1:-1, 1:] > v[1:-1, 1:])
    assert np.all(sigma2[:, 0] == 0.0)
    assert coeffs.ellipticity_violations() == []


def test_apply_jump_adds_weighted_payoffs(solver, make_problem):
    problem = make_problem()
    grid = problem.grid
    quotes = [call(100.0, 0.25), put(100.0, 0.25)]
    phi = solver.apply_jump(np.zeros(grid.shape), quotes, [2.0, -1.0], grid)
    discount = quotes[0].discount
    expected = 2.0 * discount * np.maximum(np.exp(grid.z) - 100.0, 0.0)
    expected -= discount * np.maximum(100.0 - np.exp(grid.z), 0.0)
    np.testing.assert_allclose(phi[:, 0], expected, rtol=1e-14, atol=1e-14)
    # constant in V
    assert np.all(phi == phi[:, :1])


def test_apply_jump_rejects_wrong_slice_shape(solver, make_problem):
    problem = make_problem()
    with pytest.raises(InputError):
        solver.apply_jump(np.zeros((3, 3)), [call(100.0, 0.25)], [1.0], problem.grid)


def test_constant_claim_shifts_value_by_multiplier(solver, make_problem):
    problem = make_problem([constant_payoff(1.0, 0.25, price=1.2)])
    solution = solver.solve_hjb(problem, [0.5])
    np.testing.assert_allclose(solution.phi0, 0.5, atol=1e-12)
    np.testing.assert_allclose(solution.sigma2.values[-1], problem.grid.v_mesh, atol=1e-12)
    np.testing.assert_allclose(solution.sigma2.values[0], problem.grid.v_mesh, atol=1e-12)
    assert solver.dual_objective(problem, [0.5]) == pytest.approx(0.1, abs=1e-12)


def test_dual_value_arithmetic(make_problem):
    problem = make_problem([call(100.0, 0.25, price=1.0), call(110.0, 0.25, price=2.0)])
    assert dual_value(problem, np.array([0.5, 0.4]), 0.5) == pytest.approx(0.8, abs=1e-15)


def test_small_multiplier_matches_reference_price(solver, make_problem):
    quote = call(100.0, 0.25)
    problem = make_problem([quote])
    reference = ForwardPricer().price_backward(problem, reference_sigma2(problem), quote)
    lam = 1e-3
    solution = solver.solve_hjb(problem, [lam])
    assert solution.phi_at_spot / lam == pytest.approx(reference, rel=1e-2)


def test_convex_payoff_raises_local_variance(solver, make_problem):
    problem = make_problem([call(100.0, 0.5)])
    sigma2 = solver.solve_hjb(problem, [1.0]).sigma2.values
    v = problem.grid.v_mesh
    floor = problem.heston.eta_bar**2 * v
    live = v > 0
    assert np.all(sigma2[:, live] > floor[live])
    # q >= 0 near the spot for a long call, so sigma^2 is pushed above V
    i0, j0 = problem.grid.spot_index
    assert sigma2[-1, i0, j0] > v[i0, j0]


def test_phi_path_is_kept_on_request(make_problem):
    problem = make_problem([call(100.0, 0.25)])
    solution = HJBSolver(HjbConfig(keep_phi_path=True)).solve_hjb(problem, [0.3])
    path = solution.phi_path
    assert path is not None and path.tag is FieldTag.PHI
    assert path.values.shape == (problem.tgrid.n_steps + 1,) + problem.grid.shape
    assert np.all(path.values[-1] == 0.0)
    np.testing.assert_array_equal(path.values[0], solution.phi0)
    assert HJBSolver().solve_hjb(problem, [0.3]).phi_path is None


@pytest.mark.parametrize("lambdas", [[1.0, 2.0], [np.nan]])
def test_bad_multipliers_are_rejected(solver, make_problem, lambdas):
    problem = make_problem([call(100.0, 0.25)])
    with pytest.raises(InputError):
        solver.solve_hjb(problem, lambdas)


def test_off_grid_maturity_is_rejected(solver, make_problem):
    problem = make_problem([call(100.0, 0.26)])
    with pytest.raises(InputError, match="maturity"):
        solver.solve_hjb(problem, [1.0])


def test_ellipticity_breach_raises(solver, make_problem):
    problem = make_problem()
    grid = problem.grid
    coeffs = PdeCoefficients.from_variance(0.1 * grid.v_mesh, grid, problem.heston)
    with pytest.raises(NumericalError, match="ellipticity"):
        solver.douglas_step(np.zeros(grid.shape), coeffs, problem.tgrid.dt, grid)
    relaxed = HJBSolver(HjbConfig(check_ellipticity=False))
    stepped = relaxed.douglas_step(np.zeros(grid.shape), coeffs, problem.tgrid.dt, grid)
    assert np.all(stepped == 0.0)


def test_rannacher_schedule():
    assert np.all(HjbConfig().theta_schedule(6, [3, 6]) == 0.5)
    weights = HjbConfig(rannacher_steps=2).theta_schedule(10, [4, 10])
    np.testing.assert_array_equal(weights, [1, 1, 1, 1, 0.5, 0.5, 0.5, 0.5, 1, 1])
    weights = HjbConfig(theta_adi=0.6, rannacher_steps=1).theta_schedule(3)
    assert weights.tolist() == [1.0, 0.6, 0.6]


def test_unit_correlation_keeps_reference_model(solver, make_problem):
    problem = make_problem([call(100.0, 0.5)], heston=HestonParams(eta_bar=-1.0))
    assert problem.heston.violations() == []
    solution = solver.solve_hjb(problem, [0.7])
    v = problem.grid.v_mesh
    assert np.all(solution.sigma2.values == v)
    reference = ForwardPricer().price_backward(
        problem, reference_sigma2(problem), problem.quotes[0]
    )
    assert solution.phi_at_spot == pytest.approx(0.7 * reference, rel=1e-10)


def test_value_converges_as_the_time_step_halves(make_problem):
    values = []
    for n_t in (20, 40, 80):
        domain = replace(SMALL_DOMAIN, n_t=n_t)
        problem = make_problem([call(100.0, 0.5)], domain=domain)
        solver = HJBSolver(HjbConfig(rannacher_steps=2))
        values.append(solver.solve_hjb(problem, [1.0]).phi_at_spot)
    coarse, fine = values[0] - values[1], values[1] - values[2]
    assert abs(fine) < abs(coarse)
    assert math.log2(abs(coarse) / abs(fine)) >= 0.9
