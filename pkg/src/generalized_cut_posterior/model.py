from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import numdiff
from .errors import PathologicalLossError

logger = logging.getLogger(__name__)

Columns = Mapping[str, np.ndarray]
ArrayLike = Sequence[float] | np.ndarray

NEG_INF = -math.inf


@dataclass(frozen=True, slots=True)
class ParamVector:
    """Named real parameter vector, e.g. theta = (phi, eta)."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        names = tuple(str(n) for n in self.names)
        if values.size != len(names):
            raise ValueError(
                f"ParamVector: {values.size} values but {len(names)} names"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"ParamVector: non-finite values {values.tolist()}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}


def as_array(x: ParamVector | ArrayLike) -> np.ndarray:
    if isinstance(x, ParamVector):
        return x.values
    return np.asarray(x, dtype=np.float64).reshape(-1)


@dataclass(frozen=True, slots=True)
class LossModule:
    """
    Per-observation loss for one module.

    Callables receive an observation (a row mapping) or the column mapping for
    the batch forms, followed by the parameters: ``(phi,)`` for module one and
    ``(eta, phi)`` for module two. Derivatives are taken with respect to the
    first parameter. ``hess`` is per observation; ``batch_hess`` returns the
    Hessian of the summed loss. Missing derivatives fall back to central
    finite differences.
    """

    per_obs_loss: Callable[..., float]
    data: pd.DataFrame
    grad: Callable[..., np.ndarray] | None = None
    hess: Callable[..., np.ndarray] | None = None
    batch_loss: Callable[..., np.ndarray] | None = None
    batch_grad: Callable[..., np.ndarray] | None = None
    batch_hess: Callable[..., np.ndarray] | None = None
    name: str = "module"
    scale: float = 1.0

    columns: dict[str, np.ndarray] = field(init=False, repr=False, compare=False)
    records: tuple[dict[str, Any], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.data) == 0:
            raise ValueError(f"{self.name}: observation table is empty")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"{self.name}: scale must be positive, got {self.scale}")
        cols = {str(c): self.data[c].to_numpy() for c in self.data.columns}
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "records", tuple(self.data.to_dict("records")))

    @property
    def n_obs(self) -> int:
        return len(self.records)

    @property
    def has_gradient(self) -> bool:
        return self.batch_grad is not None or self.grad is not None

    def scaled(self, c: float) -> "LossModule":
        """Same module with every loss term multiplied by ``c``."""
        return replace(self, scale=self.scale * c)

    def losses(self, *params: np.ndarray) -> np.ndarray:
        if self.batch_loss is not None:
            out = np.asarray(self.batch_loss(self.columns, *params), dtype=np.float64)
        else:
            out = np.fromiter(
                (self.per_obs_loss(r, *params) for r in self.records),
                dtype=np.float64,
                count=self.n_obs,
            )
        return self.scale * out

    def total(self, *params: np.ndarray) -> float:
        value = float(np.sum(self.losses(*params)))
        if not math.isfinite(value):
            raise PathologicalLossError(
                f"{self.name}: non-finite summed loss {value!r} at "
                f"{[np.round(p, 6).tolist() for p in params]}"
            )
        return value

    def obs_gradients(self, *params: np.ndarray) -> np.ndarray:
        """(n_obs, d) matrix of per-observation gradients in the first parameter."""
        x0, rest = params[0], params[1:]
        if self.batch_grad is not None:
            G = np.asarray(self.batch_grad(self.columns, *params), dtype=np.float64)
        elif self.grad is not None:
            G = np.vstack([self.grad(r, *params) for r in self.records])
        else:
            G = np.vstack(
                [
                    numdiff.gradient(
                        lambda x, r=r: self.per_obs_loss(r, x, *rest), x0
                    )
                    for r in self.records
                ]
            )
        return self.scale * G

    def gradient(self, *params: np.ndarray) -> np.ndarray:
        if self.has_gradient:
            return self.obs_gradients(*params).sum(axis=0)
        x0, rest = params[0], params[1:]
        return numdiff.gradient(lambda x: self.total(x, *rest), x0)

    def hessian(self, *params: np.ndarray) -> np.ndarray:
        x0, rest = params[0], params[1:]
        if self.batch_hess is not None:
            H = self.scale * np.asarray(self.batch_hess(self.columns, *params))
        elif self.hess is not None:
            H = self.scale * sum(np.asarray(self.hess(r, *params)) for r in self.records)
        elif self.has_gradient:
            H = numdiff.hessian(
                lambda x: self.total(x, *rest),
                x0,
                grad=lambda x: self.gradient(x, *rest),
            )
        else:
            H = numdiff.hessian(lambda x: self.total(x, *rest), x0)
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        return 0.5 * (H + H.T)

    def cross_hessian(self, *params: np.ndarray) -> np.ndarray:
        """d^2/(d params[0] d params[1]) of the summed loss, shape (d0, d1)."""
        x0, y0, rest = params[0], params[1], params[2:]
        return numdiff.jacobian(lambda y: self.gradient(x0, y, *rest), y0)


def _always(*_: Any) -> bool:
    return True


@dataclass(frozen=True, slots=True)
class LogPrior:
    """Possibly unnormalized log prior; ``-inf`` wherever ``support_check`` fails."""

    log_density: Callable[..., float]
    support_check: Callable[..., bool] = _always
    grad: Callable[..., np.ndarray] | None = None
    hess: Callable[..., np.ndarray] | None = None
    mean: Callable[..., np.ndarray] | None = None

    def __call__(self, *params: np.ndarray) -> float:
        if not self.support_check(*params):
            return NEG_INF
        value = float(self.log_density(*params))
        if math.isnan(value):
            raise PathologicalLossError(f"log prior is NaN at {params[0].tolist()}")
        return value

    def gradient(self, *params: np.ndarray) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(*params), dtype=np.float64)
        x0, rest = params[0], params[1:]
        return numdiff.gradient(lambda x: self(x, *rest), x0)

    def hessian(self, *params: np.ndarray) -> np.ndarray:
        if self.hess is not None:
            return np.atleast_2d(np.asarray(self.hess(*params), dtype=np.float64))
        x0, rest = params[0], params[1:]
        return numdiff.hessian(
            lambda x: self(x, *rest), x0, grad=lambda x: self.gradient(x, *rest)
        )

    def center(self, *rest: np.ndarray) -> np.ndarray | None:
        if self.mean is None:
            return None
        m = np.asarray(self.mean(*rest), dtype=np.float64)
        return m if np.all(np.isfinite(m)) else None


def flat_prior(
    lower: float | ArrayLike = -math.inf, upper: float | ArrayLike = math.inf
) -> LogPrior:
    """Constant log density on the open box (lower, upper)."""
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)

    def support(x: np.ndarray, *_: Any) -> bool:
        return bool(np.all(x > lo) and np.all(x < hi))

    return LogPrior(
        log_density=lambda x, *_: 0.0,
        support_check=support,
        grad=lambda x, *_: np.zeros_like(x),
        hess=lambda x, *_: np.zeros((x.size, x.size)),
    )


def normal_prior(mean: float | ArrayLike, sd: float | ArrayLike) -> LogPrior:
    """Independent normal components; ignores any conditioning parameters."""
    m = np.asarray(mean, dtype=np.float64)
    s = np.asarray(sd, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError(f"normal_prior: sd must be positive, got {s.tolist()}")

    def log_density(x: np.ndarray, *_: Any) -> float:
        return float(np.sum(stats.norm.logpdf(x, m, s)))

    def grad(x: np.ndarray, *_: Any) -> np.ndarray:
        return -(x - m) / s**2

    def hess(x: np.ndarray, *_: Any) -> np.ndarray:
        return -np.diag(np.broadcast_to(1.0 / s**2, x.shape))

    return LogPrior(
        log_density=log_density,
        grad=grad,
        hess=hess,
        mean=lambda *_: np.asarray(m, dtype=np.float64),
    )


# (rng, S, nu) -> (S, d_phi) exact draws from the cut marginal at rate nu
PhiSampler = Callable[[np.random.Generator, int, float], np.ndarray]


@dataclass(frozen=True, slots=True)
class TwoModuleSystem:
    """
    Two-module generalized Bayesian system.

    Module one carries (z, loss l, prior pi(phi), rate nu); module two carries
    (w, loss m, conditional prior pi(eta|phi), rate nu_prime).
    L(phi) = -sum l(z_i, phi) and M(eta, phi) = -sum m(w_i, eta, phi).
    """

    module1: LossModule
    module2: LossModule
    prior_phi: LogPrior
    prior_eta: LogPrior
    phi_names: tuple[str, ...]
    eta_names: tuple[str, ...]
    nu: float = 1.0
    nu_prime: float = 1.0
    phi_sampler: PhiSampler | None = None
    phi_init: np.ndarray | None = None
    eta_init: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi_names", tuple(self.phi_names))
        object.__setattr__(self, "eta_names", tuple(self.eta_names))
        if not self.phi_names or not self.eta_names:
            raise ValueError("TwoModuleSystem: d_phi and d_eta must be positive")
        for label, rate in (("nu", self.nu), ("nu_prime", self.nu_prime)):
            if not (rate >= 0 and math.isfinite(rate)):
                raise ValueError(f"TwoModuleSystem: {label} must be >= 0, got {rate}")

    @property
    def d_phi(self) -> int:
        return len(self.phi_names)

    @property
    def d_eta(self) -> int:
        return len(self.eta_names)

    @property
    def names(self) -> tuple[str, ...]:
        return self.phi_names + self.eta_names

    def split(self, theta: ParamVector | ArrayLike) -> tuple[np.ndarray, np.ndarray]:
        t = as_array(theta)
        if t.size != self.d_phi + self.d_eta:
            raise ValueError(
                f"theta has {t.size} entries, expected {self.d_phi + self.d_eta}"
            )
        return t[: self.d_phi], t[self.d_phi :]

    def join(self, phi: ArrayLike, eta: ArrayLike) -> ParamVector:
        return ParamVector(np.concatenate([as_array(phi), as_array(eta)]), self.names)

    def with_rates(
        self, nu: float | None = None, nu_prime: float | None = None
    ) -> "TwoModuleSystem":
        return replace(
            self,
            nu=self.nu if nu is None else float(nu),
            nu_prime=self.nu_prime if nu_prime is None else float(nu_prime),
        )

    def with_module2(
        self, module2: LossModule, prior_eta: LogPrior | None = None
    ) -> "TwoModuleSystem":
        return replace(
            self,
            module2=module2,
            prior_eta=self.prior_eta if prior_eta is None else prior_eta,
        )

    def default_phi_init(self) -> np.ndarray:
        if self.phi_init is not None:
            return np.asarray(self.phi_init, dtype=np.float64).copy()
        center = self.prior_phi.center()
        return center if center is not None else np.zeros(self.d_phi)

    def default_eta_init(self, phi: np.ndarray) -> np.ndarray:
        if self.eta_init is not None:
            return np.asarray(self.eta_init(phi), dtype=np.float64)
        center = self.prior_eta.center(phi)
        return center if center is not None else np.zeros(self.d_eta)


def log_cut_marginal_phi(sys: TwoModuleSystem, phi: ParamVector | ArrayLike) -> float:
    """log pi(phi) + nu * L(phi); never touches module two."""
    p = as_array(phi)
    lp = sys.prior_phi(p)
    if lp == NEG_INF or sys.nu == 0.0:
        return lp
    return lp - sys.nu * sys.module1.total(p)


def log_conditional_eta(
    sys: TwoModuleSystem,
    eta: ParamVector | ArrayLike,
    phi: ParamVector | ArrayLike,
) -> float:
    """Kernel of pi(eta | w, phi): log pi(eta|phi) + nu' * M(eta, phi)."""
    e = as_array(eta)
    p = as_array(phi)
    lp = sys.prior_eta(e, p)
    if lp == NEG_INF or sys.nu_prime == 0.0:
        return lp
    return lp - sys.nu_prime * sys.module2.total(e, p)


def log_generalized_posterior(
    sys: TwoModuleSystem, theta: ParamVector | ArrayLike
) -> float:
    phi, eta = sys.split(theta)
    head = log_cut_marginal_phi(sys, phi)
    if head == NEG_INF:
        return head
    return head + log_conditional_eta(sys, eta, phi)
