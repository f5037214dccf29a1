from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
from scipy import stats

from .model import LogPrior, LossModule, TwoModuleSystem

logger = logging.getLogger(__name__)

LOSS2_CHOICES = ("gaussian", "tukey")
DEFAULT_KAPPA = 5.0


@dataclass(frozen=True, slots=True)
class ReData:
    """Grouped observations Y (N groups x J replicates)."""

    Y: np.ndarray

    def __post_init__(self) -> None:
        Y = np.array(self.Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[0] < 1 or Y.shape[1] < 1:
            raise ValueError(f"ReData: Y must be a non-empty N x J matrix, got {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise ValueError("ReData: Y has non-finite entries")
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)

    @property
    def N(self) -> int:
        return int(self.Y.shape[0])

    @property
    def J(self) -> int:
        return int(self.Y.shape[1])

    @property
    def w(self) -> np.ndarray:
        """Group means."""
        return self.Y.mean(axis=1)

    @property
    def z(self) -> np.ndarray:
        """Within-group sums of squares about the group mean."""
        return ((self.Y - self.w[:, None]) ** 2).sum(axis=1)

    def raw_table(self) -> pd.DataFrame:
        """Long layout: one row per (group, replicate) with value ``y``."""
        g, j = np.indices(self.Y.shape)
        return pd.DataFrame(
            {"group": g.ravel() + 1, "j": j.ravel() + 1, "y": self.Y.ravel()}
        )

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.raw_table().to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
        return path

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "ReData":
        missing = [c for c in ("group", "j", "y") if c not in df.columns]
        if missing:
            raise ValueError(f"random-effects table is missing columns {missing}")
        wide = df.pivot(index="group", columns="j", values="y").sort_index()
        if wide.isna().any().any():
            raise ValueError("random-effects table is not balanced (missing (group, j) cells)")
        return cls(wide.to_numpy(dtype=np.float64))

    @classmethod
    def from_csv(cls, path: Path) -> "ReData":
        return cls.from_frame(pd.read_csv(path, encoding="utf-8"))


def re_simulate(
    N: int = 100,
    J: int = 10,
    psi: float = 1.0,
    phi_values: float | np.ndarray = 0.5,
    beta_overrides: Mapping[int, float] | None = None,
    seed: int = 0,
) -> ReData:
    """
    Y_ij ~ N(beta_i, phi_i^2) with beta_i ~ N(0, psi^2) except the 0-based
    indices in ``beta_overrides`` (default: the first group fixed at 10).
    """
    if N < 1 or J < 1:
        raise ValueError(f"re_simulate: need N, J >= 1, got N={N}, J={J}")
    phi = np.broadcast_to(np.asarray(phi_values, dtype=np.float64), (N,))
    if np.any(phi <= 0):
        raise ValueError(f"re_simulate: phi values must be > 0, got min {phi.min()}")
    if not psi > 0:
        raise ValueError(f"re_simulate: psi must be > 0, got {psi}")
    overrides = {0: 10.0} if beta_overrides is None else dict(beta_overrides)
    rng = np.random.default_rng(seed)
    beta = rng.normal(0.0, psi, size=N)
    for i, b in overrides.items():
        if not 0 <= i < N:
            raise ValueError(f"re_simulate: override index {i} outside 0..{N - 1}")
        beta[i] = b
    Y = beta[:, None] + phi[:, None] * rng.standard_normal((N, J))
    return ReData(Y)


def tukey_rho(r: np.ndarray, kappa: float) -> np.ndarray:
    """Tukey's loss of standardized residuals, without the scale term."""
    r = np.asarray(r, dtype=np.float64)
    r2 = r * r
    inner = 0.5 * r2 - r2**2 / (2.0 * kappa**2) + r2**3 / (6.0 * kappa**4)
    return np.where(np.abs(r) <= kappa, inner, kappa**2 / 6.0)


def tukey_psi(r: np.ndarray, kappa: float) -> np.ndarray:
    """d rho / d r."""
    r = np.asarray(r, dtype=np.float64)
    u = r * r / kappa**2
    return np.where(np.abs(r) <= kappa, r * (1.0 - u) ** 2, 0.0)


def tukey_psi_prime(r: np.ndarray, kappa: float) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    u = r * r / kappa**2
    return np.where(np.abs(r) <= kappa, (1.0 - u) * (1.0 - 5.0 * u), 0.0)


def _gaussian_rho(r: np.ndarray, kappa: float) -> np.ndarray:
    return 0.5 * np.asarray(r) ** 2


def _gaussian_psi(r: np.ndarray, kappa: float) -> np.ndarray:
    return np.asarray(r, dtype=np.float64)


def _gaussian_psi_prime(r: np.ndarray, kappa: float) -> np.ndarray:
    return np.ones_like(np.asarray(r, dtype=np.float64))


_RHO = {
    "gaussian": (_gaussian_rho, _gaussian_psi, _gaussian_psi_prime),
    "tukey": (tukey_rho, tukey_psi, tukey_psi_prime),
}


def _module1(z: np.ndarray, J: int) -> LossModule:
    a = (J - 1) / 2.0
    df = pd.DataFrame({"idx": np.arange(z.size), "z": z})

    def per_obs(obs: Mapping[str, Any], phi: np.ndarray) -> float:
        s = phi[int(obs["idx"])]
        return float(-stats.gamma.logpdf(obs["z"], a, scale=2.0 * s * s))

    def batch_loss(cols, phi):
        s = phi[cols["idx"]]
        return -stats.gamma.logpdf(cols["z"], a, scale=2.0 * s * s)

    def batch_grad(cols, phi):
        i = cols["idx"]
        s = phi[i]
        G = np.zeros((i.size, phi.size))
        G[np.arange(i.size), i] = -cols["z"] / s**3 + 2.0 * a / s
        return G

    def batch_hess(cols, phi):
        s = phi[cols["idx"]]
        diag = np.zeros(phi.size)
        np.add.at(diag, cols["idx"], 3.0 * cols["z"] / s**4 - 2.0 * a / s**2)
        return np.diag(diag)

    return LossModule(
        per_obs_loss=per_obs,
        data=df,
        batch_loss=batch_loss,
        batch_grad=batch_grad,
        batch_hess=batch_hess,
        name="re_within_group",
    )


def _module2(w: np.ndarray, J: int, loss2: str, kappa: float) -> LossModule:
    rho, psi, psi_prime = _RHO[loss2]
    sqrt_j = math.sqrt(J)
    n = w.size
    df = pd.DataFrame({"idx": np.arange(n), "w": w})

    def resid(cols, eta, phi):
        i = cols["idx"]
        s = phi[i]
        return (cols["w"] - eta[i]) * sqrt_j / s, s

    def per_obs(obs: Mapping[str, Any], eta: np.ndarray, phi: np.ndarray) -> float:
        i = int(obs["idx"])
        r = (obs["w"] - eta[i]) * sqrt_j / phi[i]
        return float(0.5 * math.log(2.0 * math.pi * phi[i] ** 2 / J) + rho(r, kappa))

    def batch_loss(cols, eta, phi):
        r, s = resid(cols, eta, phi)
        return 0.5 * np.log(2.0 * math.pi * s**2 / J) + rho(r, kappa)

    def batch_grad(cols, eta, phi):
        r, s = resid(cols, eta, phi)
        i = cols["idx"]
        G = np.zeros((i.size, eta.size))
        G[np.arange(i.size), i] = -psi(r, kappa) * sqrt_j / s
        return G

    def batch_hess(cols, eta, phi):
        r, s = resid(cols, eta, phi)
        diag = np.zeros(eta.size)
        np.add.at(diag, cols["idx"], psi_prime(r, kappa) * J / s**2)
        return np.diag(diag)

    return LossModule(
        per_obs_loss=per_obs,
        data=df,
        batch_loss=batch_loss,
        batch_grad=batch_grad,
        batch_hess=batch_hess,
        name="re_group_means" if loss2 == "gaussian" else f"re_group_means_tukey_{kappa:g}",
    )


def _phi_prior() -> LogPrior:
    """pi(phi_i) proportional to 1 / phi_i on phi_i > 0."""
    return LogPrior(
        log_density=lambda phi: -float(np.sum(np.log(phi))),
        support_check=lambda phi: bool(np.all(phi > 0)),
        grad=lambda phi: -1.0 / phi,
        hess=lambda phi: np.diag(1.0 / phi**2),
    )


def _eta_prior(N: int, J: int) -> LogPrior:
    """
    beta_i | psi ~ N(0, psi^2) and pi(psi | phi) proportional to
    psi / (mean(phi^2) / J + psi^2) on psi > 0.
    """

    def c_of(phi: np.ndarray) -> float:
        return float(np.mean(phi**2)) / J

    def support(eta: np.ndarray, phi: np.ndarray) -> bool:
        return bool(eta[N] > 0)

    def log_density(eta: np.ndarray, phi: np.ndarray) -> float:
        beta, psi = eta[:N], eta[N]
        c = c_of(phi)
        log_beta = float(np.sum(stats.norm.logpdf(beta, 0.0, psi)))
        return log_beta + math.log(psi) - math.log(c + psi * psi)

    def grad(eta: np.ndarray, phi: np.ndarray) -> np.ndarray:
        beta, psi = eta[:N], eta[N]
        c = c_of(phi)
        g = np.empty(N + 1)
        g[:N] = -beta / psi**2
        g[N] = -N / psi + np.sum(beta**2) / psi**3 + 1.0 / psi - 2.0 * psi / (c + psi**2)
        return g

    def hess(eta: np.ndarray, phi: np.ndarray) -> np.ndarray:
        beta, psi = eta[:N], eta[N]
        c = c_of(phi)
        H = np.zeros((N + 1, N + 1))
        H[np.arange(N), np.arange(N)] = -1.0 / psi**2
        H[:N, N] = H[N, :N] = 2.0 * beta / psi**3
        H[N, N] = (
            N / psi**2
            - 3.0 * np.sum(beta**2) / psi**4
            - 1.0 / psi**2
            - 2.0 * (c - psi**2) / (c + psi**2) ** 2
        )
        return H

    return LogPrior(log_density=log_density, support_check=support, grad=grad, hess=hess)


def re_system(
    data: ReData,
    loss2: str = "gaussian",
    kappa: float = DEFAULT_KAPPA,
    *,
    nu: float = 1.0,
    nu_prime: float = 1.0,
) -> TwoModuleSystem:
    """
    Random-effects model on the sufficient statistics.

    Module one: z_i | phi_i ~ Gamma((J-1)/2, scale 2 phi_i^2) with
    pi(phi_i) proportional to 1/phi_i; phi_i^2 has an inverse-gamma cut
    marginal and is sampled directly. Module two: w_i | beta_i, phi_i under
    the Gaussian negative log-likelihood with variance phi_i^2 / J, or Tukey's
    loss of the standardized residual with tuning constant ``kappa``.
    eta = (beta_1..beta_N, psi).
    """
    if loss2 not in LOSS2_CHOICES:
        raise ValueError(f"loss2 must be one of {LOSS2_CHOICES}, got {loss2!r}")
    if not kappa > 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    N, J = data.N, data.J
    if J < 2:
        raise ValueError(f"re_system needs J >= 2 replicates per group, got {J}")
    z, w = data.z, data.w
    if np.any(z <= 0):
        raise ValueError("re_system: a group has zero within-group spread (z_i = 0)")
    a = (J - 1) / 2.0

    def phi_sampler(rng: np.random.Generator, S: int, rate: float) -> np.ndarray:
        # phi_i^2 ~ InvGamma(rate * a, rate * z_i / 2)
        v = (rate * z / 2.0) / rng.gamma(rate * a, size=(S, N))
        return np.sqrt(v)

    def eta_init(phi: np.ndarray) -> np.ndarray:
        return np.concatenate([w, [max(float(np.std(w)), 0.1)]])

    return TwoModuleSystem(
        module1=_module1(z, J),
        module2=_module2(w, J, loss2, kappa),
        prior_phi=_phi_prior(),
        prior_eta=_eta_prior(N, J),
        phi_names=tuple(f"phi_{i + 1}" for i in range(N)),
        eta_names=tuple(f"beta_{i + 1}" for i in range(N)) + ("psi",),
        nu=nu,
        nu_prime=nu_prime,
        phi_sampler=phi_sampler,
        phi_init=np.sqrt(z / (J - 1)),
        eta_init=eta_init,
        label="re" if loss2 == "gaussian" else f"re_tukey_{kappa:g}",
    )


def beta_names(sys: TwoModuleSystem) -> tuple[str, ...]:
    """eta coordinates that enter the module-two loss (psi is held fixed)."""
    return tuple(n for n in sys.eta_names if n.startswith("beta_"))
