from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import make_normal_normal

from generalized_cut_posterior.errors import IndefiniteHessianError, SolverError
from generalized_cut_posterior.hpv import hpv_system, simulate_hpv
from generalized_cut_posterior.optimize import (
    InnerSolveCache,
    hessian_eta,
    maximize,
    repair_pd,
    solve_conditional_mode,
)


def test_newton_solves_a_quadratic_in_one_step():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -2.0])
    res = maximize(
        lambda x: float(-0.5 * x @ A @ x + b @ x),
        np.zeros(2),
        lambda x: b - A @ x,
        lambda x: -A,
    )
    assert res.converged
    assert res.iterations == 1
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-12)


def test_gradient_fallback_on_non_concave_region():
    # f = -(x^2 - 1)^2 has a convex region around 0
    res = maximize(
        lambda x: float(-((x[0] ** 2 - 1.0) ** 2)),
        np.array([0.2]),
        lambda x: np.array([-4.0 * x[0] * (x[0] ** 2 - 1.0)]),
        lambda x: np.array([[-(12.0 * x[0] ** 2 - 4.0)]]),
    )
    assert res.converged
    assert abs(res.x[0]) == pytest.approx(1.0, abs=1e-6)


def test_non_finite_start_raises():
    with pytest.raises(SolverError, match="initial point"):
        maximize(lambda x: -math.inf, np.zeros(1), lambda x: x, lambda x: np.eye(1))


def test_max_iter_reports_non_convergence():
    res = maximize(
        lambda x: float(-np.sum(x**4)),
        np.array([5.0]),
        lambda x: -4.0 * x**3,
        lambda x: np.diag(-12.0 * x**2),
        max_iter=2,
    )
    assert not res.converged
    assert res.iterations == 2


def test_repair_pd():
    A = np.diag([1.0, 0.0])
    B = repair_pd(A)
    assert np.all(np.linalg.eigvalsh(B) > 0)
    assert np.allclose(B, A, atol=1e-7)
    P = np.eye(2)
    np.testing.assert_array_equal(repair_pd(P), P)
    with pytest.raises(IndefiniteHessianError, match="not positive definite"):
        repair_pd(np.diag([1.0, -5.0]))


def test_conditional_mode_matches_closed_form(normal_normal):
    phi = 0.8
    res = solve_conditional_mode(normal_normal.sys, [phi])
    mean, sd = normal_normal.conditional_eta(phi)
    assert res.converged
    assert res.eta_hat[0] == pytest.approx(mean, abs=1e-10)
    assert res.precision[0, 0] == pytest.approx(sd**-2, rel=1e-10)
    n2 = normal_normal.w.size
    assert res.J[0, 0] == pytest.approx(sd**-2 / n2, rel=1e-10)


def test_loss_only_mode_is_the_m_estimator(normal_normal):
    phi = 0.8
    res = solve_conditional_mode(normal_normal.sys, [phi], include_prior=False)
    assert res.eta_hat[0] == pytest.approx(normal_normal.w.mean() - phi, abs=1e-10)
    assert res.J[0, 0] == pytest.approx(1.0)
    H = hessian_eta(normal_normal.sys, res.eta_hat, [phi])
    assert H[0, 0] == pytest.approx(normal_normal.w.size)


def test_loss_only_mode_needs_positive_rate():
    sys = make_normal_normal(nu_prime=0.0).sys
    with pytest.raises(SolverError, match="nu_prime > 0"):
        solve_conditional_mode(sys, [0.0], include_prior=False)


def test_zero_rate_gives_the_prior(normal_normal):
    sys = normal_normal.sys.with_rates(nu_prime=0.0)
    res = solve_conditional_mode(sys, [0.3])
    assert res.eta_hat[0] == pytest.approx(0.0, abs=1e-10)
    assert res.precision[0, 0] == pytest.approx(1.0 / normal_normal.tau**2)


def test_cache_hits_on_repeated_phi(normal_normal):
    cache = InnerSolveCache(normal_normal.sys, maxsize=2)
    a = cache.solve([0.1])
    b = cache.solve([0.1])
    assert a is b
    assert (cache.hits, cache.misses) == (1, 1)
    cache.solve([0.2])
    cache.solve([0.3])
    cache.solve([0.1])
    assert cache.misses == 4


def test_roundoff_level_gradient_still_converges():
    # gradient noise of 1e-6 never clears tol, but the Newton decrement does
    res = maximize(
        lambda x: float(1e6 - 0.5 * (x[0] - 2.0) ** 2),
        np.zeros(1),
        lambda x: np.array([-(x[0] - 2.0) + 1e-6 * math.sin(1e9 * x[0])]),
        lambda x: np.array([[-1.0]]),
    )
    assert res.converged
    assert res.iterations < 5
    assert res.x[0] == pytest.approx(2.0, abs=1e-5)


def test_stalled_line_search_is_not_progress():
    # f and grad disagree in sign, so no step can be accepted
    res = maximize(
        lambda x: float(-x[0]),
        np.zeros(1),
        lambda x: np.array([1.0]),
        lambda x: np.array([[-1.0]]),
    )
    assert not res.converged
    assert res.iterations == 0


def test_hpv_inner_solves_converge_at_beta_draws():
    sys = hpv_system(simulate_hpv(seed=0))
    phis = sys.phi_sampler(np.random.default_rng(0), 300, 1.0)
    failed = [s for s in range(300) if not solve_conditional_mode(sys, phis[s]).converged]
    assert failed == []
