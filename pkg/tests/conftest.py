from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from generalized_cut_posterior.model import LossModule, TwoModuleSystem, normal_prior

PHI_PRIOR_SD = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _gauss_loss(obs, phi):
    return 0.5 * (obs["z"] - phi[0]) ** 2 + _HALF_LOG_2PI


def _gauss_batch(cols, phi):
    return 0.5 * (cols["z"] - phi[0]) ** 2 + _HALF_LOG_2PI


def _gauss_batch_grad(cols, phi):
    return -(cols["z"] - phi[0])[:, None]


def _gauss_batch_hess(cols, phi):
    return np.array([[float(cols["z"].size)]])


def _shift_loss(obs, eta, phi):
    return 0.5 * (obs["w"] - eta[0] - phi[0]) ** 2 + _HALF_LOG_2PI


def _shift_batch(cols, eta, phi):
    return 0.5 * (cols["w"] - eta[0] - phi[0]) ** 2 + _HALF_LOG_2PI


def _shift_batch_grad(cols, eta, phi):
    return -(cols["w"] - eta[0] - phi[0])[:, None]


def _shift_batch_hess(cols, eta, phi):
    return np.array([[float(cols["w"].size)]])


@dataclass(frozen=True)
class NormalNormal:
    """
    z_i ~ N(phi, 1), phi ~ N(0, 10^2); w_i ~ N(eta + phi, 1), eta ~ N(0, tau^2).

    Every posterior quantity has a closed form.
    """

    sys: TwoModuleSystem
    z: np.ndarray
    w: np.ndarray
    tau: float

    @property
    def nu(self) -> float:
        return self.sys.nu

    @property
    def nu_prime(self) -> float:
        return self.sys.nu_prime

    def cut_phi(self) -> tuple[float, float]:
        """Mean and sd of the cut marginal of phi."""
        prec = PHI_PRIOR_SD**-2 + self.nu * self.z.size
        return self.nu * float(self.z.sum()) / prec, prec**-0.5

    def conditional_eta(self, phi: float) -> tuple[float, float]:
        """Mean and sd of eta | w, phi."""
        prec = self.tau**-2 + self.nu_prime * self.w.size
        return self.nu_prime * float(np.sum(self.w - phi)) / prec, prec**-0.5

    def log_m(self, phi: float) -> float:
        """ln m_eta(w | phi) at nu' = 1."""
        n = self.w.size
        cov = np.eye(n) + self.tau**2 * np.ones((n, n))
        return float(stats.multivariate_normal.logpdf(self.w, np.full(n, phi), cov))

    def full_phi(self) -> tuple[float, float]:
        """Mean and sd of phi under the joint posterior at nu = nu' = 1."""
        n2 = self.w.size
        # w-bar | phi ~ N(phi, tau^2 + 1/n2)
        v = self.tau**2 + 1.0 / n2
        prec = PHI_PRIOR_SD**-2 + self.z.size + 1.0 / v
        mean = (float(self.z.sum()) + float(self.w.mean()) / v) / prec
        return mean, prec**-0.5


def make_normal_normal(
    n1: int = 50,
    n2: int = 50,
    *,
    seed: int = 0,
    nu: float = 1.0,
    nu_prime: float = 1.0,
    tau: float = 2.0,
    phi_true: float = 1.0,
    eta_true: float = 0.5,
    direct: bool = True,
) -> NormalNormal:
    rng = np.random.default_rng(seed)
    z = rng.normal(phi_true, 1.0, size=n1)
    w = rng.normal(eta_true + phi_true, 1.0, size=n2)
    module1 = LossModule(
        per_obs_loss=_gauss_loss,
        data=pd.DataFrame({"z": z}),
        batch_loss=_gauss_batch,
        batch_grad=_gauss_batch_grad,
        batch_hess=_gauss_batch_hess,
        name="gauss",
    )
    module2 = LossModule(
        per_obs_loss=_shift_loss,
        data=pd.DataFrame({"w": w}),
        batch_loss=_shift_batch,
        batch_grad=_shift_batch_grad,
        batch_hess=_shift_batch_hess,
        name="shift",
    )

    def phi_sampler(rng: np.random.Generator, S: int, rate: float) -> np.ndarray:
        prec = PHI_PRIOR_SD**-2 + rate * z.size
        return rng.normal(rate * z.sum() / prec, prec**-0.5, size=(S, 1))

    sys = TwoModuleSystem(
        module1=module1,
        module2=module2,
        prior_phi=normal_prior(0.0, PHI_PRIOR_SD),
        prior_eta=normal_prior(0.0, tau),
        phi_names=("phi",),
        eta_names=("eta",),
        nu=nu,
        nu_prime=nu_prime,
        phi_sampler=phi_sampler if direct else None,
        label="normal_normal",
    )
    return NormalNormal(sys=sys, z=z, w=w, tau=tau)


@pytest.fixture
def normal_normal() -> NormalNormal:
    return make_normal_normal()


def random_spd(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    return A @ A.T + d * np.eye(d)
