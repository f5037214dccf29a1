from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import SingularInformationError, SolverError
from .model import NEG_INF, ArrayLike, TwoModuleSystem, as_array
from .optimize import (
    InnerSolveResult,
    MaximizeResult,
    hessian_eta,
    maximize,
    repair_pd,
    solve_conditional_mode,
)

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, slots=True)
class ConditionalNormal:
    """Normal approximation to pi(eta | w, phi): mean eta_hat_phi, precision n2 nu' J."""

    phi: np.ndarray
    mean: np.ndarray
    precision: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        P = np.atleast_2d(np.asarray(self.precision, dtype=np.float64))
        if not np.allclose(P, P.T, rtol=1e-10, atol=0.0):
            raise ValueError("ConditionalNormal: precision is not symmetric")
        P = 0.5 * (P + P.T)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ValueError("ConditionalNormal: precision is not positive definite") from None
        object.__setattr__(self, "phi", as_array(self.phi).copy())
        object.__setattr__(self, "mean", as_array(self.mean).copy())
        object.__setattr__(self, "precision", P)
        object.__setattr__(self, "chol", L)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @property
    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.dim))

    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def log_det_covariance(self) -> float:
        return -self.log_det_precision()

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Map rows of x to L^T (x - mean), standard normal under this law."""
        return (np.atleast_2d(x) - self.mean) @ self.chol

    def logpdf(self, x: ArrayLike) -> float:
        y = self.whiten(as_array(x))[0]
        return float(
            -0.5 * self.dim * _LOG_2PI + 0.5 * self.log_det_precision() - 0.5 * y @ y
        )

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        z = rng.standard_normal((size, self.dim))
        # x = mean + L^{-T} z has covariance (L L^T)^{-1}
        return self.mean + linalg.solve_triangular(self.chol, z.T, trans="T", lower=True).T


def conditional_laplace(
    sys: TwoModuleSystem,
    phi: ArrayLike,
    *,
    init: ArrayLike | None = None,
    include_prior: bool = True,
    solved: InnerSolveResult | None = None,
) -> ConditionalNormal:
    p = as_array(phi)
    res = solved or solve_conditional_mode(sys, p, init, include_prior=include_prior)
    if not res.converged:
        raise SolverError(
            f"inner solve did not converge at phi={np.round(p, 6).tolist()} "
            f"(iterations={res.iterations}, grad_norm={res.grad_norm:.3g})"
        )
    return ConditionalNormal(phi=p, mean=res.eta_hat, precision=res.precision)


def phi_mode(sys: TwoModuleSystem, init: ArrayLike | None = None) -> MaximizeResult:
    """phi_hat = argmax L(phi), restricted to the support of pi(phi)."""
    m1 = sys.module1
    prior = sys.prior_phi

    def f(p: np.ndarray) -> float:
        if not prior.support_check(p):
            return NEG_INF
        return -m1.total(p)

    x0 = sys.default_phi_init() if init is None else as_array(init)
    res = maximize(
        f, x0, lambda p: -m1.gradient(p), lambda p: -m1.hessian(p), n_scale=m1.n_obs
    )
    if not res.converged:
        raise SolverError(
            f"{m1.name}: maximizing L did not converge "
            f"(iterations={res.iterations}, grad_norm={res.grad_norm:.3g})"
        )
    return res


@dataclass(frozen=True, slots=True)
class JointNormal:
    """
    Normal law on (phi, eta), or on phi alone when d_eta == 0.

    ``V`` is the covariance of the local parameter
    (sqrt(n1) (phi - phi_hat), sqrt(n2) (eta - eta_hat)); ``covariance`` is on
    the raw scale.
    """

    mean: np.ndarray
    covariance: np.ndarray
    names: tuple[str, ...]
    d_phi: int
    V: np.ndarray | None = None
    n1: int | None = None
    n2: int | None = None

    @property
    def d_eta(self) -> int:
        return int(self.mean.size) - self.d_phi

    def marginal_phi(self) -> "JointNormal":
        k = self.d_phi
        return JointNormal(
            self.mean[:k],
            self.covariance[:k, :k],
            self.names[:k],
            k,
            None if self.V is None else self.V[:k, :k],
            self.n1,
            None,
        )

    def conditional(self, phi: ArrayLike) -> ConditionalNormal:
        """eta | phi under this joint law; the covariance does not depend on phi."""
        if self.d_eta == 0:
            raise ValueError("JointNormal has no eta block")
        k = self.d_phi
        C = self.covariance
        C11, C12, C22 = C[:k, :k], C[:k, k:], C[k:, k:]
        p = as_array(phi)
        slope = linalg.solve(C11, C12, assume_a="pos").T
        mean = self.mean[k:] + slope @ (p - self.mean[:k])
        cond_cov = C22 - slope @ C12
        precision = np.linalg.inv(0.5 * (cond_cov + cond_cov.T))
        return ConditionalNormal(phi=p, mean=mean, precision=0.5 * (precision + precision.T))

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.covariance, size=size, method="cholesky")


def marginal_laplace_phi(sys: TwoModuleSystem) -> JointNormal:
    """N(phi_hat, [nu * (-grad^2 L)]^{-1}) at phi_hat = argmax L."""
    if sys.nu <= 0:
        raise ValueError(f"marginal_laplace_phi needs nu > 0, got {sys.nu}")
    mode = phi_mode(sys)
    n1 = sys.module1.n_obs
    Sigma11 = repair_pd(sys.nu * sys.module1.hessian(mode.x) / n1, where="phi_hat")
    cov = np.linalg.inv(n1 * Sigma11)
    return JointNormal(
        mean=mode.x,
        covariance=0.5 * (cov + cov.T),
        names=sys.phi_names,
        d_phi=sys.d_phi,
        V=np.linalg.inv(Sigma11),
        n1=n1,
    )


def assemble_v(
    S11: np.ndarray, S12: np.ndarray, S22: np.ndarray, vartheta: float
) -> np.ndarray:
    """Block covariance V of the local parameter from Sigma blocks and vartheta."""
    S11 = np.atleast_2d(S11)
    S22 = np.atleast_2d(S22)
    for label, block in (("Sigma11", S11), ("Sigma22", S22)):
        if np.linalg.cond(block) > 1e12:
            raise SingularInformationError(f"{label} is singular (cond > 1e12)")
    S12 = np.asarray(S12, dtype=np.float64).reshape(S11.shape[0], S22.shape[0])
    try:
        S11i = np.linalg.inv(S11)
        S22i = np.linalg.inv(S22)
    except np.linalg.LinAlgError:
        raise SingularInformationError("Sigma11 or Sigma22 is singular") from None
    if not (np.all(np.isfinite(S11i)) and np.all(np.isfinite(S22i))):
        raise SingularInformationError("Sigma11 or Sigma22 is singular")
    V12 = -vartheta * S11i @ S12 @ S22i
    V22 = S22i + vartheta**2 * S22i @ S12.T @ S11i @ S12 @ S22i
    V = np.block([[S11i, V12], [V12.T, V22]])
    return 0.5 * (V + V.T)


def joint_laplace(
    sys: TwoModuleSystem,
    zeta: float | None = None,
    *,
    include_prior: bool = False,
) -> JointNormal:
    """
    Joint normal approximation of the cut posterior.

    Blocks are evaluated at phi_hat = argmax L and eta_hat = argmax M(., phi_hat):
    Sigma11 = nu (-grad^2 L)/n1, Sigma22 = nu' (-grad^2_eta M)/n2 and
    Sigma12 = nu' (-grad^2_{phi eta} M)/n2, signed so the conditional mean
    follows d eta_hat / d phi.
    """
    if sys.nu <= 0 or sys.nu_prime <= 0:
        raise ValueError(
            f"joint_laplace needs positive rates, got nu={sys.nu}, nu'={sys.nu_prime}"
        )
    m1, m2 = sys.module1, sys.module2
    n1, n2 = m1.n_obs, m2.n_obs
    zeta = n1 / n2 if zeta is None else float(zeta)
    if not (0 < zeta < math.inf):
        raise ValueError(f"zeta must be in (0, inf), got {zeta}")

    phi_hat = phi_mode(sys).x
    inner = solve_conditional_mode(sys, phi_hat, include_prior=include_prior)
    if not inner.converged:
        raise SolverError("inner solve at phi_hat did not converge")
    eta_hat = inner.eta_hat

    S11 = sys.nu * m1.hessian(phi_hat) / n1
    S22 = sys.nu_prime * hessian_eta(
        sys, eta_hat, phi_hat, include_prior=include_prior
    ) / n2
    S12 = sys.nu_prime * m2.cross_hessian(eta_hat, phi_hat).T / n2
    V = assemble_v(S11, S12, S22, zeta**-0.5)

    d_inv_sqrt = np.concatenate(
        [np.full(sys.d_phi, n1**-0.5), np.full(sys.d_eta, n2**-0.5)]
    )
    cov = d_inv_sqrt[:, None] * V * d_inv_sqrt[None, :]
    logger.debug("joint_laplace: zeta=%.4g, logdet V=%.4g", zeta, np.linalg.slogdet(V)[1])
    return JointNormal(
        mean=np.concatenate([phi_hat, eta_hat]),
        covariance=0.5 * (cov + cov.T),
        names=sys.names,
        d_phi=sys.d_phi,
        V=V,
        n1=n1,
        n2=n2,
    )
