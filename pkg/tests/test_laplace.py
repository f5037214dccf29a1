from __future__ import annotations

import numpy as np
import pytest
from conftest import make_normal_normal, random_spd
from scipy import stats

from generalized_cut_posterior.errors import SingularInformationError
from generalized_cut_posterior.laplace import (
    ConditionalNormal,
    assemble_v,
    conditional_laplace,
    joint_laplace,
    marginal_laplace_phi,
    phi_mode,
)


def test_conditional_normal_density_and_moments():
    P = random_spd(3, seed=1)
    mean = np.array([1.0, -2.0, 0.5])
    normal = ConditionalNormal(phi=np.zeros(1), mean=mean, precision=P)
    x = np.array([0.3, -1.0, 1.2])
    expected = stats.multivariate_normal.logpdf(x, mean, np.linalg.inv(P))
    assert normal.logpdf(x) == pytest.approx(expected, rel=1e-10)
    draws = normal.sample(np.random.default_rng(0), 40_000)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.02)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), np.linalg.inv(P), atol=0.01)
    assert normal.log_det_covariance() == pytest.approx(-np.linalg.slogdet(P)[1])


def test_conditional_normal_rejects_bad_precision():
    with pytest.raises(ValueError, match="positive definite"):
        ConditionalNormal(phi=np.zeros(1), mean=np.zeros(2), precision=np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="symmetric"):
        ConditionalNormal(phi=np.zeros(1), mean=np.zeros(2), precision=[[1.0, 0.5], [0.0, 1.0]])


def test_conditional_laplace_is_exact_for_conjugate_module(normal_normal):
    normal = conditional_laplace(normal_normal.sys, [1.1])
    mean, sd = normal_normal.conditional_eta(1.1)
    assert normal.mean[0] == pytest.approx(mean, abs=1e-10)
    assert normal.covariance[0, 0] == pytest.approx(sd**2, rel=1e-10)


def test_marginal_laplace_centres_on_the_loss_minimizer(normal_normal):
    approx = marginal_laplace_phi(normal_normal.sys)
    assert approx.mean[0] == pytest.approx(normal_normal.z.mean(), abs=1e-10)
    assert approx.covariance[0, 0] == pytest.approx(1.0 / normal_normal.z.size)
    assert phi_mode(normal_normal.sys).converged


def test_assemble_v_block_diagonal_without_cross_term():
    S11, S22 = np.diag([2.0, 4.0]), np.array([[5.0]])
    V = assemble_v(S11, np.zeros((2, 1)), S22, vartheta=0.7)
    np.testing.assert_allclose(V, np.diag([0.5, 0.25, 0.2]))


def test_assemble_v_singular_block():
    with pytest.raises(SingularInformationError, match="Sigma22"):
        assemble_v(np.eye(1), np.zeros((1, 2)), np.diag([1.0, 0.0]), 1.0)


@pytest.mark.parametrize("n1,n2", [(50, 50), (200, 40)])
def test_joint_laplace_recovers_cut_conditional(n1, n2):
    nn = make_normal_normal(n1, n2, seed=3)
    joint = joint_laplace(nn.sys)
    phi_hat = joint.mean[0]
    assert phi_hat == pytest.approx(nn.z.mean(), abs=1e-10)
    a = joint.conditional([phi_hat])
    b = joint.conditional([phi_hat + 1.0])
    # eta_hat(phi) = mean(w) - phi
    assert b.mean[0] - a.mean[0] == pytest.approx(-1.0, abs=1e-5)
    assert a.covariance[0, 0] == pytest.approx(1.0 / n2, rel=1e-5)
    assert joint.marginal_phi().covariance[0, 0] == pytest.approx(1.0 / n1)
