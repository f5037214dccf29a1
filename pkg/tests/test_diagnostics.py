from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import make_normal_normal, random_spd
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from generalized_cut_posterior.diagnostics import (
    PropagationTable,
    compare_marginals,
    credible_set_mc,
    ellipse_polyline,
    ellipses_frame,
    interval_jaccard,
    propagation_table,
    select_by_logdet_quantiles,
    third_cumulant_decomposition,
    total_variance_decomposition,
    wasserstein1_1d,
)
from generalized_cut_posterior.hpv import hpv_system, simulate_hpv
from generalized_cut_posterior.laplace import ConditionalNormal
from generalized_cut_posterior.random_effects import re_simulate, re_system
from generalized_cut_posterior.samplers import CutStrategy, McmcConfig, sample_cut
from generalized_cut_posterior.samples import SampleSet

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
samples = st.lists(finite, min_size=1, max_size=40)


@settings(max_examples=50, deadline=None)
@given(a=samples, b=samples, c=samples)
def test_wasserstein_is_a_metric_on_the_line(a, b, c):
    ab = wasserstein1_1d(a, b)
    assert wasserstein1_1d(a, a) == 0.0
    assert ab >= 0.0
    assert wasserstein1_1d(b, a) == pytest.approx(ab, rel=1e-9, abs=1e-9)
    assert ab <= wasserstein1_1d(a, c) + wasserstein1_1d(c, b) + 1e-6


@settings(max_examples=30, deadline=None)
@given(a=samples, shift=finite)
def test_wasserstein_of_a_shift_is_the_shift(a, shift):
    moved = np.asarray(a) + shift
    assert wasserstein1_1d(a, moved) == pytest.approx(abs(shift), rel=1e-6, abs=1e-6)


def test_wasserstein_rejects_empty():
    with pytest.raises(ValueError, match="nonempty"):
        wasserstein1_1d([], [1.0])


@pytest.mark.parametrize("d", [1, 2, 5])
@pytest.mark.parametrize("alpha", [0.5, 0.1, 0.05])
def test_credible_set_keeps_the_nominal_fraction(d, alpha):
    K = 100_000
    normal = ConditionalNormal(phi=[0.0], mean=np.arange(d, dtype=float), precision=random_spd(d, d))
    out = credible_set_mc(None, None, alpha, K, seed=d, normal=normal)
    assert abs(out.fraction - (1.0 - alpha)) <= 3.0 * math.sqrt(alpha * (1.0 - alpha) / K)
    assert out.threshold == pytest.approx(stats.chi2.ppf(1.0 - alpha, d))
    assert out.whitened.shape == (K, d)
    assert out.retained.shape[0] == round(out.fraction * K)


def test_credible_set_edges():
    normal = ConditionalNormal(phi=[0.0], mean=[0.0, 0.0], precision=np.eye(2))
    assert credible_set_mc(None, None, 1.0, 100, 0, normal=normal).fraction == 0.0
    assert credible_set_mc(None, None, 0.0, 100, 0, normal=normal).fraction == 1.0
    with pytest.raises(ValueError, match="alpha"):
        credible_set_mc(None, None, 1.5, 100, 0, normal=normal)
    with pytest.raises(ValueError, match="needs"):
        credible_set_mc(None, None, 0.1, 100, 0)


def test_credible_set_from_a_system(normal_normal):
    out = credible_set_mc(normal_normal.sys, [1.0], 0.1, 20_000, seed=4)
    assert out.fraction == pytest.approx(0.9, abs=0.01)


def test_ellipse_lies_on_the_chi2_contour():
    P = random_spd(2, 7)
    normal = ConditionalNormal(phi=[0.0], mean=[1.0, -2.0], precision=P)
    pts = ellipse_polyline(normal, alpha=0.05, n_points=64)
    assert pts.shape == (64, 2)
    dev = pts - normal.mean
    r2 = np.einsum("ij,jk,ik->i", dev, P, dev)
    np.testing.assert_allclose(r2, stats.chi2.ppf(0.95, 2), rtol=1e-10)


def test_ellipse_needs_two_dimensions():
    normal = ConditionalNormal(phi=[0.0], mean=[0.0], precision=[[1.0]])
    with pytest.raises(ValueError, match="2-D"):
        ellipse_polyline(normal)


def _gaussian_table(nn, S=400, seed=0):
    phis = np.random.default_rng(seed).normal(*nn.cut_phi(), size=(S, 1))
    return phis, propagation_table(nn.sys, phis)


def test_propagation_table_is_exact_for_normal_normal(normal_normal):
    nn = normal_normal
    phis, table = _gaussian_table(nn)
    assert table.S == phis.shape[0]
    assert table.failures == 0
    for s in (0, 17, 399):
        mean, sd = nn.conditional_eta(phis[s, 0])
        assert table.mu[s, 0] == pytest.approx(mean, abs=1e-8)
        assert table.sigma_diag[s, 0] == pytest.approx(sd**2, rel=1e-8)
        assert table.logdet[s] == pytest.approx(2.0 * math.log(sd), rel=1e-8)
    frame = table.to_frame()
    assert list(frame.columns) == ["s", "phi", "mu_eta", "var_eta", "logdet"]


def test_total_variance_for_normal_normal(normal_normal):
    nn = normal_normal
    phis, table = _gaussian_table(nn)
    ev, vm = total_variance_decomposition(table)
    _, sd = nn.conditional_eta(0.0)
    slope = nn.w.size * sd**2
    assert ev[0] == pytest.approx(sd**2, rel=1e-8)
    assert vm[0] == pytest.approx(slope**2 * phis[:, 0].var(ddof=1), rel=1e-6)
    with pytest.raises(ValueError, match="rows"):
        total_variance_decomposition(table, phis[:10])


def test_third_cumulant_terms_vanish_for_linear_gaussian(normal_normal):
    _, table = _gaussian_table(normal_normal, S=2000, seed=1)
    term2, term3 = third_cumulant_decomposition(table)
    mu_sd = table.mu[:, 0].std()
    assert abs(term3[0]) < 1e-10
    assert abs(term2[0]) < 0.4 * mu_sd**3


def test_cumulant_terms_are_unbiased_sample_estimates():
    rng = np.random.default_rng(12)
    mu = rng.gamma(2.0, size=(50, 1))
    sig = 1.0 + 0.3 * mu + rng.uniform(size=(50, 1))
    table = PropagationTable(
        phi=np.zeros((50, 1)),
        mu=mu,
        sigma_diag=sig,
        logdet=np.log(sig[:, 0]),
        phi_names=("phi",),
        eta_names=("eta",),
    )
    term2, term3 = third_cumulant_decomposition(table)
    assert term2[0] == pytest.approx(stats.kstat(mu[:, 0], 3), rel=1e-10)
    assert term3[0] == pytest.approx(3.0 * np.cov(mu[:, 0], sig[:, 0])[0, 1], rel=1e-10)
    _, vm = total_variance_decomposition(table)
    assert vm[0] == pytest.approx(stats.kstat(mu[:, 0], 2), rel=1e-10)
    with pytest.raises(ValueError, match="at least 3"):
        third_cumulant_decomposition(
            PropagationTable(
                phi=np.zeros((2, 1)),
                mu=mu[:2],
                sigma_diag=sig[:2],
                logdet=np.zeros(2),
                phi_names=("phi",),
                eta_names=("eta",),
            )
        )


def test_total_variance_matches_cut_draws_for_normal_normal():
    nn = make_normal_normal(seed=5)
    S = 4000
    out = sample_cut(nn.sys, S, CutStrategy(), McmcConfig(seed=2))
    table = propagation_table(nn.sys, out)
    ev, vm = total_variance_decomposition(table)
    empirical = out.column("eta").var(ddof=1)
    assert ev[0] + vm[0] == pytest.approx(empirical, rel=4.0 * math.sqrt(2.0 / S))


def test_total_variance_matches_cut_draws_for_hpv():
    sys = hpv_system(simulate_hpv(seed=0))
    S = 1000
    out = sample_cut(sys, S, CutStrategy(), McmcConfig(seed=6))
    assert out.meta["failures"] <= 2
    table = propagation_table(sys, out)
    assert table.failures == 0
    ev, vm = total_variance_decomposition(table)
    for j, name in enumerate(sys.eta_names):
        empirical = out.column(name).var(ddof=1)
        assert ev[j] + vm[j] == pytest.approx(empirical, rel=5.0 * math.sqrt(2.0 / S))


def test_total_variance_matches_cut_draws_for_random_effects():
    sys = re_system(re_simulate(N=20, J=10, seed=2))
    S = 2000
    out = sample_cut(sys, S, CutStrategy(), McmcConfig(seed=9))
    table = propagation_table(sys, out)
    assert table.failures == 0
    ev, vm = total_variance_decomposition(table)
    for name in ("beta_1", "beta_2", "psi"):
        j = sys.eta_names.index(name)
        empirical = out.column(name).var(ddof=1)
        assert ev[j] + vm[j] == pytest.approx(empirical, rel=5.0 * math.sqrt(2.0 / S))


def test_logdet_quantile_rows():
    table = PropagationTable(
        phi=np.arange(11.0)[:, None],
        mu=np.zeros((11, 1)),
        sigma_diag=np.ones((11, 1)),
        logdet=np.arange(11.0),
        phi_names=("phi",),
        eta_names=("eta",),
    )
    assert select_by_logdet_quantiles(table).tolist() == [1, 3, 5, 7, 9]
    assert select_by_logdet_quantiles(table, [0.0, 1.0]).tolist() == [0, 10]


def test_propagation_table_rejects_nonpositive_variances():
    with pytest.raises(ValueError, match="positive"):
        PropagationTable(
            phi=np.zeros((1, 1)),
            mu=np.zeros((1, 1)),
            sigma_diag=np.zeros((1, 1)),
            logdet=np.zeros(1),
            phi_names=("phi",),
            eta_names=("eta",),
        )


def test_nested_mcmc_propagation_tracks_laplace(normal_normal):
    nn = normal_normal
    phis = np.array([[0.8], [1.0], [1.2]])
    exact = propagation_table(nn.sys, phis)
    nested = propagation_table(
        nn.sys,
        phis,
        method="nested_mcmc",
        strategy=CutStrategy(variant="nested_mcmc", nested_steps=4000, nested_burn_in=500),
        seed=3,
    )
    assert nested.method == "nested_mcmc"
    sd = math.sqrt(exact.sigma_diag[0, 0])
    np.testing.assert_allclose(nested.mu, exact.mu, atol=0.25 * sd)
    np.testing.assert_allclose(nested.sigma_diag, exact.sigma_diag, rtol=0.35)
    with pytest.raises(ValueError, match="method"):
        propagation_table(nn.sys, phis, method="exact")


def test_interval_jaccard_and_marginals():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 2))
    a = SampleSet(x, ("u", "v"), "cut")
    b = SampleSet(x + [0.0, 10.0], ("u", "v"), "full")
    jac = interval_jaccard(a, b)
    assert jac["u"] == 1.0
    assert jac["v"] == 0.0
    frame = compare_marginals(a, b)
    assert list(frame.columns) == [
        "name",
        "mean_a",
        "mean_b",
        "wasserstein1",
        "ks_statistic",
        "ks_pvalue",
    ]
    assert frame.loc[0, "wasserstein1"] == 0.0
    assert frame.loc[1, "wasserstein1"] == pytest.approx(10.0)


def test_ellipses_frame_for_hpv():
    sys = hpv_system(simulate_hpv(seed=1))
    rows = np.vstack([sys.default_phi_init()] * 2)
    frame = ellipses_frame(sys, rows, n_points=16)
    assert list(frame.columns) == ["s", "x", "y"]
    assert frame["s"].tolist() == [1] * 16 + [2] * 16
