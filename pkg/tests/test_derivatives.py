from __future__ import annotations

import numpy as np
import pytest
from conftest import make_normal_normal
from hypothesis import given, settings
from hypothesis import strategies as st

from generalized_cut_posterior import numdiff
from generalized_cut_posterior.hpv import hpv_system, simulate_hpv
from generalized_cut_posterior.model import log_generalized_posterior
from generalized_cut_posterior.random_effects import re_simulate, re_system

POINTS = 20


def _close(numeric, analytic, rtol=1e-4):
    analytic = np.asarray(analytic)
    atol = 1e-6 * (1.0 + float(np.max(np.abs(analytic))))
    np.testing.assert_allclose(numeric, analytic, rtol=rtol, atol=atol)


def test_hpv_module_one_derivatives():
    sys = hpv_system(simulate_hpv(seed=0))
    m1 = sys.module1
    rng = np.random.default_rng(1)
    for _ in range(POINTS):
        phi = rng.uniform(0.05, 0.5, size=sys.d_phi)
        _close(numdiff.gradient(m1.total, phi), m1.gradient(phi))
        _close(numdiff.jacobian(m1.gradient, phi), m1.hessian(phi))


def test_hpv_module_two_derivatives():
    sys = hpv_system(simulate_hpv(seed=0))
    m2 = sys.module2
    rng = np.random.default_rng(2)
    phis = sys.phi_sampler(rng, POINTS, 1.0)
    for phi in phis:
        eta = sys.default_eta_init(phi) + rng.normal(0.0, [0.1, 1.0])
        _close(numdiff.gradient(lambda e: m2.total(e, phi), eta), m2.gradient(eta, phi))
        _close(
            numdiff.jacobian(lambda e: m2.gradient(e, phi), eta), m2.hessian(eta, phi)
        )


def test_re_module_one_derivatives():
    sys = re_system(re_simulate(N=10, J=10, seed=3))
    m1 = sys.module1
    rng = np.random.default_rng(3)
    for _ in range(POINTS):
        phi = rng.uniform(0.3, 1.0, size=sys.d_phi)
        _close(numdiff.gradient(m1.total, phi), m1.gradient(phi))
        _close(numdiff.jacobian(m1.gradient, phi), m1.hessian(phi))


@pytest.mark.parametrize("loss2", ["gaussian", "tukey"])
def test_re_module_two_derivatives(loss2):
    data = re_simulate(N=10, J=10, seed=4)
    sys = re_system(data, loss2, 5.0)
    m2 = sys.module2
    rng = np.random.default_rng(4)
    for _ in range(POINTS):
        phi = rng.uniform(0.3, 1.0, size=sys.d_phi)
        # standardized residuals spread over both sides of kappa
        beta = data.w + phi / np.sqrt(data.J) * rng.normal(0.0, 3.0, size=sys.d_phi)
        eta = np.append(beta, rng.uniform(0.5, 2.0))
        _close(numdiff.gradient(lambda e: m2.total(e, phi), eta), m2.gradient(eta, phi))
        _close(
            numdiff.jacobian(lambda e: m2.gradient(e, phi), eta),
            m2.hessian(eta, phi),
            rtol=1e-3,
        )


def test_psi_prior_derivatives():
    sys = re_system(re_simulate(N=10, J=10, seed=5))
    prior = sys.prior_eta
    rng = np.random.default_rng(5)
    for _ in range(POINTS):
        phi = rng.uniform(0.3, 1.0, size=sys.d_phi)
        eta = np.append(rng.normal(0.0, 1.0, size=sys.d_phi), rng.uniform(0.5, 2.0))
        _close(numdiff.gradient(lambda e: prior(e, phi), eta), prior.gradient(eta, phi))
        _close(
            numdiff.jacobian(lambda e: prior.gradient(e, phi), eta), prior.hessian(eta, phi)
        )


@settings(max_examples=25, deadline=None)
@given(
    c=st.floats(min_value=0.05, max_value=20.0),
    phi=st.floats(min_value=-3.0, max_value=3.0),
    eta=st.floats(min_value=-3.0, max_value=3.0),
)
def test_rate_and_loss_scale_trade_off(c, phi, eta):
    sys = make_normal_normal(seed=6, nu_prime=1.3).sys
    moved = sys.with_rates(nu_prime=c * sys.nu_prime).with_module2(sys.module2.scaled(1.0 / c))
    theta = np.array([phi, eta])
    assert log_generalized_posterior(moved, theta) == pytest.approx(
        log_generalized_posterior(sys, theta), rel=1e-10, abs=1e-8
    )
