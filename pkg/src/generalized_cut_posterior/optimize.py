from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IndefiniteHessianError, NumericalError, SolverError
from .model import NEG_INF, ArrayLike, TwoModuleSystem, as_array

logger = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 60
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
FLAT_RTOL = 1e3 * np.finfo(np.float64).eps
JITTER_START = 1e-8
JITTER_MAX = 1e-2


@dataclass(frozen=True, slots=True)
class MaximizeResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    hess: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def _is_pd(A: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def repair_pd(A: np.ndarray, where: str = "") -> np.ndarray:
    """
    Return ``A`` itself if positive definite, else ``A + jitter * I`` with jitter
    1e-8 * mean(diag) escalating by 10x up to 1e-2 * mean(diag).
    """
    A = 0.5 * (A + A.T)
    if _is_pd(A):
        return A
    scale = abs(float(np.mean(np.diag(A)))) or 1.0
    eye = np.eye(A.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-12):
        B = A + jitter * scale * eye
        if _is_pd(B):
            logger.debug("jitter %.1e applied%s", jitter, f" at {where}" if where else "")
            return B
        jitter *= 10.0
    eig_min = float(np.linalg.eigvalsh(A)[0])
    raise IndefiniteHessianError(eig_min, where)


def maximize(
    f: Callable[[np.ndarray], float],
    x0: ArrayLike,
    grad: Callable[[np.ndarray], np.ndarray],
    hess: Callable[[np.ndarray], np.ndarray],
    *,
    n_scale: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> MaximizeResult:
    """
    Damped Newton ascent with Armijo backtracking.

    Falls back to a scaled gradient step wherever the Hessian is not negative
    definite. Converged means ||grad|| / n_scale <= tol, or a Newton
    decrement that f cannot resolve at working precision.
    """
    x = np.array(as_array(x0), dtype=np.float64)
    fx = float(f(x))
    if not math.isfinite(fx):
        raise SolverError(f"objective is {fx} at the initial point {x.tolist()}")

    g = np.asarray(grad(x), dtype=np.float64)
    H = np.atleast_2d(np.asarray(hess(x), dtype=np.float64))
    it = 0
    while True:
        gnorm = float(np.linalg.norm(g)) / n_scale
        if gnorm <= tol:
            return MaximizeResult(x, fx, g, H, True, it, gnorm)
        if it >= max_iter:
            logger.debug("maximize: no convergence after %d iterations", it)
            return MaximizeResult(x, fx, g, H, False, it, gnorm)

        negH = -0.5 * (H + H.T)
        newton = _is_pd(negH)
        if newton:
            step = np.linalg.solve(negH, g)
        else:
            denom = float(np.max(np.abs(np.diag(H)))) or 1.0
            step = g / denom

        slope = float(g @ step)
        if newton and 0.5 * slope <= FLAT_RTOL * max(1.0, abs(fx)):
            # decrement below the roundoff of f
            return MaximizeResult(x, fx, g, H, True, it, gnorm)

        t = 1.0
        for _ in range(MAX_HALVINGS):
            x_new = x + t * step
            if np.array_equal(x_new, x):
                break
            f_new = float(f(x_new))
            if f_new != NEG_INF and f_new >= fx + ARMIJO_C * t * slope:
                break
            t *= 0.5
        else:
            x_new = x
        if np.array_equal(x_new, x):
            logger.debug("maximize: line search stalled at iteration %d", it)
            return MaximizeResult(x, fx, g, H, False, it, gnorm)

        x, fx = x_new, f_new
        g = np.asarray(grad(x), dtype=np.float64)
        H = np.atleast_2d(np.asarray(hess(x), dtype=np.float64))
        it += 1


@dataclass(frozen=True, slots=True)
class InnerSolveResult:
    """
    eta_hat maximizes the conditional objective at phi; ``precision`` is the
    (jitter-repaired) negated Hessian of that objective, i.e. n2 * nu' * J.
    """

    eta_hat: np.ndarray
    J: np.ndarray
    precision: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def _objective(sys: TwoModuleSystem, phi: np.ndarray, include_prior: bool):
    nu2 = sys.nu_prime
    m2 = sys.module2
    prior = sys.prior_eta

    if include_prior:

        def f(e: np.ndarray) -> float:
            lp = prior(e, phi)
            if lp == NEG_INF or nu2 == 0.0:
                return lp
            return lp - nu2 * m2.total(e, phi)

        def g(e: np.ndarray) -> np.ndarray:
            out = prior.gradient(e, phi)
            return out if nu2 == 0.0 else out - nu2 * m2.gradient(e, phi)

        def h(e: np.ndarray) -> np.ndarray:
            out = prior.hessian(e, phi)
            return out if nu2 == 0.0 else out - nu2 * m2.hessian(e, phi)

    else:

        def f(e: np.ndarray) -> float:
            if not prior.support_check(e, phi):
                return NEG_INF
            return -m2.total(e, phi)

        def g(e: np.ndarray) -> np.ndarray:
            return -m2.gradient(e, phi)

        def h(e: np.ndarray) -> np.ndarray:
            return -m2.hessian(e, phi)

    return f, g, h


def hessian_eta(
    sys: TwoModuleSystem,
    eta: ArrayLike,
    phi: ArrayLike,
    *,
    include_prior: bool = False,
) -> np.ndarray:
    """
    Negated eta-Hessian of M(eta, phi), so it is positive definite at a
    maximizer; equals n2 * J. With ``include_prior`` the curvature of
    log pi(eta|phi) / nu' is added.
    """
    e, p = as_array(eta), as_array(phi)
    H = sys.module2.hessian(e, p)
    if include_prior:
        Hp = sys.prior_eta.hessian(e, p)
        H = -Hp if sys.nu_prime == 0.0 else H - Hp / sys.nu_prime
    if not np.all(np.isfinite(H)):
        raise NumericalError(f"non-finite eta Hessian at phi={p.tolist()}")
    return 0.5 * (H + H.T)


def solve_conditional_mode(
    sys: TwoModuleSystem,
    phi: ArrayLike,
    init: ArrayLike | None = None,
    *,
    include_prior: bool = True,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> InnerSolveResult:
    """
    Conditional mode of eta given phi and its curvature J.

    By default the mode of log pi(eta|phi) + nu' M(eta, phi) is returned;
    ``include_prior=False`` maximizes M alone.
    """
    p = as_array(phi)
    x0 = sys.default_eta_init(p) if init is None else as_array(init)
    f, g, h = _objective(sys, p, include_prior)
    n2 = sys.module2.n_obs
    res = maximize(f, x0, g, h, n_scale=n2, tol=tol, max_iter=max_iter)

    if include_prior:
        precision = -0.5 * (res.hess + res.hess.T)
        denom = n2 * sys.nu_prime if sys.nu_prime > 0 else n2
    else:
        precision = -0.5 * (res.hess + res.hess.T) * sys.nu_prime
        denom = n2 * sys.nu_prime
        if sys.nu_prime == 0.0:
            raise SolverError("include_prior=False needs nu_prime > 0")
    precision = repair_pd(precision, where=f"phi={np.round(p, 6).tolist()}")
    return InnerSolveResult(
        eta_hat=res.x,
        J=precision / denom,
        precision=precision,
        converged=res.converged,
        iterations=res.iterations,
        grad_norm=res.grad_norm,
    )


class InnerSolveCache:
    """
    Thread-safe LRU memo of inner solves keyed by the bytes of phi.
    """

    def __init__(
        self,
        sys: TwoModuleSystem,
        *,
        include_prior: bool = True,
        maxsize: int = 4096,
    ) -> None:
        self.sys = sys
        self.include_prior = include_prior
        self.maxsize = maxsize
        self._lock = threading.Lock()
        self._store: OrderedDict[bytes, InnerSolveResult] = OrderedDict()
        self._last: np.ndarray | None = None
        self.hits = 0
        self.misses = 0

    def solve(self, phi: ArrayLike, init: ArrayLike | None = None) -> InnerSolveResult:
        p = np.ascontiguousarray(as_array(phi))
        key = p.tobytes()
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self._store.move_to_end(key)
                self.hits += 1
                return hit
            warm = self._last if init is None else as_array(init)
        res = solve_conditional_mode(
            self.sys, p, warm, include_prior=self.include_prior
        )
        with self._lock:
            self.misses += 1
            self._store[key] = res
            if res.converged:
                self._last = res.eta_hat
            while len(self._store) > self.maxsize:
                self._store.popitem(last=False)
        return res
