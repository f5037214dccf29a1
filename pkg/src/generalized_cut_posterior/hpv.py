from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
from scipy import special, stats

from .model import LossModule, TwoModuleSystem, flat_prior, normal_prior

logger = logging.getLogger(__name__)

HPV_COLUMNS = ("country", "z", "N", "w", "T")
ETA_PRIOR_VARIANCE = 1000.0
LOSS2_CHOICES = ("poisson", "quasi")


@dataclass(frozen=True, slots=True)
class HpvData:
    """
    Per-country survey and registry counts.

    z: women with high-risk HPV among N surveyed; w: cervical cancer cases
    over T woman-years (thousands).
    """

    z: np.ndarray
    N: np.ndarray
    w: np.ndarray
    T: np.ndarray
    country: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=np.int64).reshape(-1)
        N = np.asarray(self.N, dtype=np.int64).reshape(-1)
        w = np.asarray(self.w, dtype=np.int64).reshape(-1)
        T = np.asarray(self.T, dtype=np.float64).reshape(-1)
        if not (z.size == N.size == w.size == T.size) or z.size == 0:
            raise ValueError(
                f"HpvData: column lengths differ or are empty ({z.size}, {N.size}, {w.size}, {T.size})"
            )
        if np.any(z < 0) or np.any(z > N):
            raise ValueError(f"HpvData: need 0 <= z <= N, got z={z.tolist()} N={N.tolist()}")
        if np.any(w < 0):
            raise ValueError(f"HpvData: negative case counts {w.tolist()}")
        if np.any(T <= 0) or not np.all(np.isfinite(T)):
            raise ValueError(f"HpvData: T must be positive, got {T.tolist()}")
        country = tuple(self.country) or tuple(f"c{i + 1}" for i in range(z.size))
        if len(country) != z.size:
            raise ValueError(f"HpvData: {len(country)} country labels for {z.size} rows")
        for name, arr in (("z", z), ("N", N), ("w", w), ("T", T)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "country", country)

    @property
    def n(self) -> int:
        return int(self.z.size)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"country": list(self.country), "z": self.z, "N": self.N, "w": self.w, "T": self.T}
        )

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
        return path

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "HpvData":
        missing = [c for c in HPV_COLUMNS[1:] if c not in df.columns]
        if missing:
            raise ValueError(f"HPV table is missing columns {missing}")
        country = tuple(df["country"].astype(str)) if "country" in df.columns else ()
        return cls(
            z=df["z"].to_numpy(),
            N=df["N"].to_numpy(),
            w=df["w"].to_numpy(),
            T=df["T"].to_numpy(dtype=np.float64),
            country=country,
        )

    @classmethod
    def from_csv(cls, path: Path) -> "HpvData":
        return cls.from_frame(pd.read_csv(path, encoding="utf-8"))


def simulate_hpv(
    n_countries: int = 13,
    seed: int = 0,
    *,
    eta: tuple[float, float] = (-2.0, 13.0),
    overdispersion_sd: float = 0.6,
) -> HpvData:
    """
    HPV-shaped data: survey sizes 90..700, prevalence 0.03..0.25, woman-years
    log-uniform on 25..3700 and lognormal overdispersion of the incidence.
    Prevalence counts are redrawn until 1 <= z <= N - 1.
    """
    if n_countries < 1:
        raise ValueError(f"n_countries must be >= 1, got {n_countries}")
    rng = np.random.default_rng(seed)
    N = rng.integers(90, 701, size=n_countries)
    phi = rng.uniform(0.03, 0.25, size=n_countries)
    T = np.exp(rng.uniform(math.log(25.0), math.log(3700.0), size=n_countries))
    z = rng.binomial(N, phi)
    bad = (z < 1) | (z > N - 1)
    while np.any(bad):
        z[bad] = rng.binomial(N[bad], phi[bad])
        bad = (z < 1) | (z > N - 1)
    rate = np.exp(eta[0] + eta[1] * phi + rng.normal(0.0, overdispersion_sd, size=n_countries))
    w = rng.poisson(T * rate)
    return HpvData(z=z, N=N, w=w, T=T)


# ---- module one: binomial prevalence ----


def _binom_loss(obs: Mapping[str, Any], phi: np.ndarray) -> float:
    return float(-stats.binom.logpmf(obs["z"], obs["N"], phi[int(obs["idx"])]))


def _binom_batch_loss(cols: Mapping[str, np.ndarray], phi: np.ndarray) -> np.ndarray:
    return -stats.binom.logpmf(cols["z"], cols["N"], phi[cols["idx"]])


def _binom_batch_grad(cols: Mapping[str, np.ndarray], phi: np.ndarray) -> np.ndarray:
    p = phi[cols["idx"]]
    z, N = cols["z"], cols["N"]
    G = np.zeros((z.size, phi.size))
    G[np.arange(z.size), cols["idx"]] = -(z / p - (N - z) / (1.0 - p))
    return G


def _binom_batch_hess(cols: Mapping[str, np.ndarray], phi: np.ndarray) -> np.ndarray:
    p = phi[cols["idx"]]
    z, N = cols["z"], cols["N"]
    diag = np.zeros(phi.size)
    np.add.at(diag, cols["idx"], z / p**2 + (N - z) / (1.0 - p) ** 2)
    return np.diag(diag)


# ---- module two: Poisson incidence, log rho = eta1 + eta2 * phi ----


def _mu(cols: Mapping[str, np.ndarray], eta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return cols["T"] * np.exp(eta[0] + eta[1] * phi[cols["idx"]])


def _poisson_loss(obs: Mapping[str, Any], eta: np.ndarray, phi: np.ndarray) -> float:
    mu = obs["T"] * math.exp(eta[0] + eta[1] * phi[int(obs["idx"])])
    return float(mu - obs["w"] * math.log(mu) + special.gammaln(obs["w"] + 1.0))


def _poisson_batch_loss(cols, eta, phi) -> np.ndarray:
    mu = _mu(cols, eta, phi)
    return mu - cols["w"] * np.log(mu) + special.gammaln(cols["w"] + 1.0)


def _poisson_batch_grad(cols, eta, phi) -> np.ndarray:
    mu = _mu(cols, eta, phi)
    x = phi[cols["idx"]]
    return (mu - cols["w"])[:, None] * np.column_stack([np.ones_like(x), x])


def _poisson_batch_hess(cols, eta, phi) -> np.ndarray:
    mu = _mu(cols, eta, phi)
    x = phi[cols["idx"]]
    return np.array(
        [[mu.sum(), (mu * x).sum()], [(mu * x).sum(), (mu * x**2).sum()]]
    )


def _eta_start(data: HpvData):
    y = np.log((data.w + 0.5) / data.T)

    def start(phi: np.ndarray) -> np.ndarray:
        if np.ptp(phi) <= 0:
            return np.array([float(y.mean()), 0.0])
        slope, intercept = np.polyfit(phi, y, 1)
        return np.array([intercept, slope])

    return start


def hpv_system(
    data: HpvData,
    loss2: str = "poisson",
    quasi_lambda: float = 1.0,
    *,
    nu: float = 1.0,
    nu_prime: float = 1.0,
) -> TwoModuleSystem:
    """
    Two-module HPV system.

    Module one: z_i ~ Binomial(N_i, phi_i) with phi_i ~ U(0, 1); the cut
    marginal is a product of Beta(nu z_i + 1, nu (N_i - z_i) + 1) laws and is
    sampled directly. Module two: w_i ~ Poisson(T_i exp(eta1 + eta2 phi_i)),
    or its quasi-likelihood (the Poisson loss divided by ``quasi_lambda``)
    with eta ~ N(0, 1000 I).
    """
    if loss2 not in LOSS2_CHOICES:
        raise ValueError(f"loss2 must be one of {LOSS2_CHOICES}, got {loss2!r}")
    if loss2 == "quasi" and not quasi_lambda > 0:
        raise ValueError(f"quasi_lambda must be > 0, got {quasi_lambda}")

    idx = np.arange(data.n)
    z_df = pd.DataFrame({"idx": idx, "z": data.z, "N": data.N})
    w_df = pd.DataFrame({"idx": idx, "w": data.w, "T": data.T})

    module1 = LossModule(
        per_obs_loss=_binom_loss,
        data=z_df,
        batch_loss=_binom_batch_loss,
        batch_grad=_binom_batch_grad,
        batch_hess=_binom_batch_hess,
        name="hpv_prevalence",
    )
    module2 = LossModule(
        per_obs_loss=_poisson_loss,
        data=w_df,
        batch_loss=_poisson_batch_loss,
        batch_grad=_poisson_batch_grad,
        batch_hess=_poisson_batch_hess,
        name="hpv_incidence",
    )
    if loss2 == "quasi":
        module2 = replace(module2, name=f"hpv_incidence_quasi_{quasi_lambda:g}").scaled(
            1.0 / quasi_lambda
        )

    z = data.z.astype(np.float64)
    Nn = data.N.astype(np.float64)

    def phi_sampler(rng: np.random.Generator, S: int, rate: float) -> np.ndarray:
        return rng.beta(rate * z + 1.0, rate * (Nn - z) + 1.0, size=(S, data.n))

    return TwoModuleSystem(
        module1=module1,
        module2=module2,
        prior_phi=flat_prior(0.0, 1.0),
        prior_eta=normal_prior(np.zeros(2), math.sqrt(ETA_PRIOR_VARIANCE)),
        phi_names=tuple(f"phi_{i + 1}" for i in range(data.n)),
        eta_names=("eta_1", "eta_2"),
        nu=nu,
        nu_prime=nu_prime,
        phi_sampler=phi_sampler,
        phi_init=(z + 0.5) / (Nn + 1.0),
        eta_init=_eta_start(data),
        label="hpv" if loss2 == "poisson" else f"hpv_quasi_{quasi_lambda:g}",
    )
