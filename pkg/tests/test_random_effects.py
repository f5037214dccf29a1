from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from generalized_cut_posterior.calibration import calibrate_nu2_bootstrap
from generalized_cut_posterior.diagnostics import interval_jaccard
from generalized_cut_posterior.model import log_conditional_eta, log_cut_marginal_phi
from generalized_cut_posterior.random_effects import (
    ReData,
    beta_names,
    re_simulate,
    re_system,
    tukey_psi,
    tukey_psi_prime,
    tukey_rho,
)
from generalized_cut_posterior.samplers import CutStrategy, McmcConfig, sample_cut, sample_full


def test_tukey_loss_is_continuous_and_flat_at_kappa():
    kappa = 5.0
    eps = 1e-9
    assert tukey_rho(kappa - eps, kappa) == pytest.approx(kappa**2 / 6.0, abs=1e-7)
    assert tukey_rho(kappa + eps, kappa) == kappa**2 / 6.0
    assert tukey_rho(-kappa - 3.0, kappa) == kappa**2 / 6.0
    assert tukey_psi(kappa, kappa) == 0.0
    assert tukey_psi(kappa - eps, kappa) == pytest.approx(0.0, abs=1e-12)


def test_tukey_derivatives_match_finite_differences():
    kappa, h = 3.0, 1e-6
    r = np.linspace(-2.9, 2.9, 41)
    num_psi = (tukey_rho(r + h, kappa) - tukey_rho(r - h, kappa)) / (2 * h)
    np.testing.assert_allclose(tukey_psi(r, kappa), num_psi, atol=1e-6)
    num_prime = (tukey_psi(r + h, kappa) - tukey_psi(r - h, kappa)) / (2 * h)
    np.testing.assert_allclose(tukey_psi_prime(r, kappa), num_prime, atol=1e-6)
    assert np.all(tukey_psi_prime(np.array([4.0, -7.0]), kappa) == 0.0)


def test_large_kappa_recovers_the_gaussian_loss():
    r = np.linspace(-10.0, 10.0, 201)
    assert np.max(np.abs(tukey_rho(r, 1e6) - 0.5 * r**2)) < 1e-6


def test_large_kappa_system_matches_gaussian_system():
    data = re_simulate(N=8, J=5, seed=2)
    gauss = re_system(data)
    tukey = re_system(data, "tukey", 1e6)
    phi = gauss.default_phi_init()
    eta = gauss.default_eta_init(phi) + 0.3
    assert tukey.module2.total(eta, phi) == pytest.approx(gauss.module2.total(eta, phi), abs=1e-6)
    assert tukey.label == "re_tukey_1e+06"


def _raw_gaussian_nll(Y: np.ndarray, beta: np.ndarray, phi: np.ndarray) -> float:
    return float(-np.sum(stats.norm.logpdf(Y, beta[:, None], phi[:, None])))


def test_sufficient_statistics_give_the_raw_likelihood():
    data = re_simulate(N=6, J=4, seed=1)
    sys = re_system(data)
    rng = np.random.default_rng(0)
    phi_a, phi_b = rng.uniform(0.3, 1.5, size=(2, data.N))
    beta_a, beta_b = rng.normal(size=(2, data.N))

    def reduced(beta, phi):
        eta = np.append(beta, 1.0)
        return sys.module1.total(phi) + sys.module2.total(eta, phi)

    want = _raw_gaussian_nll(data.Y, beta_a, phi_a) - _raw_gaussian_nll(data.Y, beta_b, phi_b)
    got = reduced(beta_a, phi_a) - reduced(beta_b, phi_b)
    assert got == pytest.approx(want, rel=1e-10, abs=1e-8)


def test_system_validation():
    data = re_simulate(N=4, J=3, seed=0)
    with pytest.raises(ValueError, match="kappa"):
        re_system(data, "tukey", 0.0)
    with pytest.raises(ValueError, match="loss2"):
        re_system(data, "huber")
    with pytest.raises(ValueError, match="J >= 2"):
        re_system(ReData(np.ones((3, 1))))
    with pytest.raises(ValueError, match="zero within-group spread"):
        re_system(ReData(np.ones((3, 2))))


def test_simulation_settings():
    data = re_simulate(N=5, J=3, seed=4)
    assert data.Y.shape == (5, 3)
    np.testing.assert_array_equal(re_simulate(N=5, J=3, seed=4).Y, data.Y)
    with pytest.raises(ValueError, match="phi values"):
        re_simulate(phi_values=0.0)
    with pytest.raises(ValueError, match="psi"):
        re_simulate(psi=-1.0)
    with pytest.raises(ValueError, match="override index"):
        re_simulate(N=3, beta_overrides={5: 1.0})
    shifted = re_simulate(N=50, J=10, phi_values=0.01, seed=3)
    assert shifted.w[0] == pytest.approx(10.0, abs=0.05)


def test_csv_reload(tmp_path):
    data = re_simulate(N=4, J=3, seed=6)
    back = ReData.from_csv(data.to_csv(tmp_path / "re.csv"))
    np.testing.assert_array_equal(back.Y, data.Y)
    raw = data.raw_table()
    with pytest.raises(ValueError, match="not balanced"):
        ReData.from_frame(raw.iloc[1:])


def test_cut_marginal_of_phi_squared_is_inverse_gamma():
    data = re_simulate(N=3, J=6, seed=5)
    sys = re_system(data, nu=0.5)
    a = 0.5 * (data.J - 1) / 2.0
    scale = 0.5 * data.z / 2.0
    phi = np.array([0.4, 0.7, 0.9])
    phi2 = phi + 0.1
    # change of variables v = phi^2 contributes log(2 phi)
    want = sum(
        stats.invgamma.logpdf(phi2[i] ** 2, a, scale=scale[i]) + math.log(2 * phi2[i])
        - stats.invgamma.logpdf(phi[i] ** 2, a, scale=scale[i]) - math.log(2 * phi[i])
        for i in range(3)
    )
    got = log_cut_marginal_phi(sys, phi2) - log_cut_marginal_phi(sys, phi)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)
    draws = sys.phi_sampler(np.random.default_rng(0), 20_000, sys.nu)
    assert np.median(draws[:, 0] ** 2) == pytest.approx(
        stats.invgamma.median(a, scale=scale[0]), rel=0.05
    )


def test_psi_prior_keeps_psi_positive():
    data = re_simulate(N=4, J=3, seed=0)
    sys = re_system(data)
    phi = sys.default_phi_init()
    eta = sys.default_eta_init(phi)
    eta[-1] = -0.5
    assert log_conditional_eta(sys, eta, phi) == -math.inf


def test_cut_sampling_runs_end_to_end():
    data = re_simulate(N=10, J=10, seed=8)
    sys = re_system(data, "tukey", 5.0)
    out = sample_cut(sys, 50, CutStrategy(), McmcConfig(seed=1))
    assert out.draws.shape == (50, 2 * 10 + 1)
    assert np.all(np.isfinite(out.column("psi")))
    assert out.meta["phi_stage"] == "direct"


def test_beta_names():
    sys = re_system(re_simulate(N=3, J=3, seed=0))
    assert beta_names(sys) == ("beta_1", "beta_2", "beta_3")


@pytest.mark.slow
def test_cut_interval_for_the_outlying_group_keeps_nominal_coverage():
    covered = 0
    for seed in range(100):
        sys = re_system(re_simulate(N=100, J=10, psi=1.0, phi_values=0.5, seed=seed))
        out = sample_cut(sys, 1000, CutStrategy(), McmcConfig(seed=seed))
        assert out.meta["failures"] == 0
        lo, hi = np.quantile(out.column("phi_1"), [0.025, 0.975])
        covered += lo <= 0.5 <= hi
    assert covered >= 88


@pytest.mark.slow
def test_tukey_full_and_cut_intervals_for_the_outlying_group_overlap():
    overlaps = []
    for seed in range(5):
        data = re_simulate(N=20, J=10, psi=1.0, phi_values=0.5, seed=seed)
        boot = calibrate_nu2_bootstrap(
            re_system(data),
            data.raw_table(),
            "group",
            B=100,
            seed=seed,
            columns={"w": "y"},
            eta_mask=[f"beta_{i + 1}" for i in range(20)],
        )
        assert 1.0 <= boot.nu_prime <= 10.0
        tukey = re_system(data, "tukey", 5.0).with_rates(nu_prime=boot.nu_prime)
        cut = sample_cut(tukey, 2000, CutStrategy(), McmcConfig(seed=seed))
        full = sample_full(tukey, 2000, McmcConfig(burn_in=5000, thin=10, seed=seed))
        overlaps.append(interval_jaccard(cut, full, names=["phi_1"])["phi_1"])
    assert np.median(overlaps) >= 0.5
