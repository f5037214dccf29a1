from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from .errors import FailureBudgetExceeded, NumericalError
from .laplace import ConditionalNormal, conditional_laplace, marginal_laplace_phi, phi_mode
from .model import (
    NEG_INF,
    ArrayLike,
    TwoModuleSystem,
    as_array,
    log_conditional_eta,
    log_cut_marginal_phi,
    log_generalized_posterior,
)
from .optimize import InnerSolveResult, solve_conditional_mode
from .samples import SampleSet

logger = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.234
FAILURE_BUDGET = 0.05
CUT_VARIANTS = ("nested_mcmc", "conditional_normal", "sir_t_proposal")

# SeedSequence stream tags
PHI_STREAM = 0
ETA_STREAM = 1


@dataclass(frozen=True, slots=True)
class McmcConfig:
    """
    Random-walk Metropolis settings.

    ``steps`` counts every iteration including burn-in; draws kept are
    ``chain[burn_in::thin]``. Samplers that are asked for S draws extend
    ``steps`` to ``burn_in + S * thin``.
    """

    steps: int = 6000
    burn_in: int = 1000
    thin: int = 1
    proposal_scale: float | tuple[float, ...] = 0.1
    seed: int = 0
    adapt: bool = True

    def __post_init__(self) -> None:
        if not (self.steps > self.burn_in >= 0):
            raise ValueError(
                f"McmcConfig: need steps > burn_in >= 0, got {self.steps}, {self.burn_in}"
            )
        if self.thin < 1:
            raise ValueError(f"McmcConfig: thin must be >= 1, got {self.thin}")
        scale = np.asarray(self.proposal_scale, dtype=np.float64)
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise ValueError(
                f"McmcConfig: proposal_scale must be > 0, got {self.proposal_scale}"
            )
        if isinstance(self.proposal_scale, list):
            object.__setattr__(self, "proposal_scale", tuple(self.proposal_scale))

    def for_draws(self, S: int) -> "McmcConfig":
        return replace(self, steps=self.burn_in + S * self.thin)


@dataclass(frozen=True, slots=True)
class CutStrategy:
    variant: str = "conditional_normal"
    sir_proposals: int = 1000
    t_dof: float = 5.0
    nested_steps: int = 500
    nested_burn_in: int = 200

    def __post_init__(self) -> None:
        if self.variant not in CUT_VARIANTS:
            raise ValueError(
                f"CutStrategy: variant must be one of {CUT_VARIANTS}, got {self.variant!r}"
            )
        if self.sir_proposals < 1:
            raise ValueError(f"CutStrategy: sir_proposals must be >= 1, got {self.sir_proposals}")
        if not self.t_dof > 0:
            raise ValueError(f"CutStrategy: t_dof must be > 0, got {self.t_dof}")
        if not (self.nested_steps > self.nested_burn_in >= 0):
            raise ValueError(
                "CutStrategy: need nested_steps > nested_burn_in >= 0, "
                f"got {self.nested_steps}, {self.nested_burn_in}"
            )


def _as_rng(seed: int | np.random.Generator | np.random.SeedSequence) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def substream(seed: int, tag: int, index: int) -> np.random.Generator:
    """Independent generator for unit ``index`` of stream ``tag``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), int(index)]))


def rwm_chain(
    log_target: Callable[[np.ndarray], float],
    init: ArrayLike,
    cfg: McmcConfig,
    *,
    proposal_cov: np.ndarray | None = None,
    names: Sequence[str] | None = None,
    source: str = "full",
    rng: np.random.Generator | None = None,
) -> SampleSet:
    """
    Random-walk Metropolis with Gaussian proposals x + scale * L z, where
    L L^T = proposal_cov (identity when omitted).

    With ``adapt`` the global log scale follows a Robbins-Monro recursion
    towards acceptance 0.234 during burn-in only.
    """
    x = np.array(as_array(init), dtype=np.float64)
    d = x.size
    lp = float(log_target(x))
    if not math.isfinite(lp):
        raise ValueError(f"rwm_chain: log target is {lp} at init {x.tolist()}")

    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    scale = np.broadcast_to(np.asarray(cfg.proposal_scale, dtype=np.float64), (d,)).copy()
    L = np.eye(d) if proposal_cov is None else np.linalg.cholesky(np.atleast_2d(proposal_cov))
    log_factor = 0.0

    kept: list[np.ndarray] = []
    acc_burn = 0
    acc_main = 0
    for it in range(cfg.steps):
        z = rng.standard_normal(d)
        prop = x + math.exp(log_factor) * scale * (L @ z)
        lp_prop = float(log_target(prop))
        log_u = math.log(rng.random())
        accepted = lp_prop != NEG_INF and log_u < lp_prop - lp
        if accepted:
            x, lp = prop, lp_prop
        if it < cfg.burn_in:
            acc_burn += accepted
            if cfg.adapt:
                log_factor += (float(accepted) - TARGET_ACCEPTANCE) / (it + 1) ** 0.6
        else:
            acc_main += accepted
            if (it - cfg.burn_in) % cfg.thin == 0:
                kept.append(x.copy())

    n_main = cfg.steps - cfg.burn_in
    meta: dict[str, Any] = {
        "seed": cfg.seed,
        "steps": cfg.steps,
        "burn_in": cfg.burn_in,
        "thin": cfg.thin,
        "acceptance": acc_main / n_main,
        "acceptance_burn_in": acc_burn / cfg.burn_in if cfg.burn_in else None,
        "scale_factor": math.exp(log_factor),
    }
    zero_acc = acc_burn == 0 if cfg.burn_in else acc_main == 0
    if zero_acc:
        msg = "rwm_chain: no proposal accepted during burn-in; chain is stuck at init"
        meta["warning"] = msg
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    labels = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(d))
    return SampleSet(np.vstack(kept), labels, source, meta)


def sir_indices(
    log_weights: ArrayLike, k: int, seed: int | np.random.Generator
) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(lw)):
        raise ValueError("sir: NaN log weight")
    top = float(np.max(lw)) if lw.size else NEG_INF
    if top == NEG_INF:
        raise ValueError("sir: every log weight is -inf")
    p = np.exp(lw - top)
    p /= p.sum()
    return _as_rng(seed).choice(lw.size, size=k, replace=True, p=p)


def sir(
    log_weights: ArrayLike,
    draws: np.ndarray,
    k: int,
    seed: int | np.random.Generator,
) -> np.ndarray:
    """Resample k rows of ``draws`` with probability proportional to exp(log_weights)."""
    draws = np.asarray(draws)
    lw = np.asarray(log_weights, dtype=np.float64).reshape(-1)
    if lw.size != draws.shape[0]:
        raise ValueError(f"sir: {lw.size} weights for {draws.shape[0]} draws")
    return draws[sir_indices(lw, k, seed)]


def _nested_chain(
    sys: TwoModuleSystem,
    phi: np.ndarray,
    normal: ConditionalNormal,
    strategy: CutStrategy,
    rng: np.random.Generator,
) -> np.ndarray:
    d = normal.dim
    cfg = McmcConfig(
        steps=strategy.nested_steps,
        burn_in=strategy.nested_burn_in,
        proposal_scale=1.0,
        seed=0,
    )
    chain = rwm_chain(
        lambda e: log_conditional_eta(sys, e, phi),
        normal.mean,
        cfg,
        proposal_cov=normal.covariance * 2.38**2 / d,
        source="conditional",
        rng=rng,
    )
    return chain.draws[-1]


def _sir_t(
    sys: TwoModuleSystem,
    phi: np.ndarray,
    normal: ConditionalNormal,
    strategy: CutStrategy,
    rng: np.random.Generator,
) -> np.ndarray:
    d = normal.dim
    proposal = stats.multivariate_t(loc=normal.mean, shape=normal.covariance, df=strategy.t_dof)
    props = np.asarray(
        proposal.rvs(size=strategy.sir_proposals, random_state=rng), dtype=np.float64
    ).reshape(strategy.sir_proposals, d)
    log_q = np.asarray(proposal.logpdf(props), dtype=np.float64).reshape(-1)
    log_p = np.array([log_conditional_eta(sys, e, phi) for e in props])
    return sir(log_p - log_q, props, 1, rng)[0]


def conditional_stage(
    sys: TwoModuleSystem,
    phi: ArrayLike,
    strategy: CutStrategy,
    rng: np.random.Generator,
    *,
    init: ArrayLike | None = None,
    include_prior: bool = True,
) -> tuple[np.ndarray, InnerSolveResult]:
    """One eta draw given phi; raises NumericalError when the inner solve fails."""
    p = as_array(phi)
    solved = solve_conditional_mode(sys, p, init, include_prior=include_prior)
    normal = conditional_laplace(sys, p, solved=solved)
    if strategy.variant == "conditional_normal":
        eta = normal.sample(rng, 1)[0]
    elif strategy.variant == "sir_t_proposal":
        eta = _sir_t(sys, p, normal, strategy, rng)
    else:
        eta = _nested_chain(sys, p, normal, strategy, rng)
    return eta, solved


def _phi_stage(
    sys: TwoModuleSystem, n: int, cfg: McmcConfig
) -> tuple[np.ndarray, dict[str, Any]]:
    if sys.phi_sampler is not None:
        rng = substream(cfg.seed, PHI_STREAM, 0)
        draws = sys.phi_sampler(rng, n, sys.nu)
        phis = np.asarray(draws, dtype=np.float64).reshape(n, sys.d_phi)
        return phis, {"phi_stage": "direct"}

    chain_cfg = cfg.for_draws(n)
    init, cov = sys.default_phi_init(), None
    try:
        approx = marginal_laplace_phi(sys)
        init = approx.mean
        cov = approx.covariance * 2.38**2 / sys.d_phi
        chain_cfg = replace(chain_cfg, proposal_scale=1.0)
    except NumericalError as exc:
        logger.info("phi stage: no Laplace preconditioner (%s)", exc)
    chain = rwm_chain(
        lambda p: log_cut_marginal_phi(sys, p),
        init,
        chain_cfg,
        proposal_cov=cov,
        names=sys.phi_names,
        source="cut",
        rng=substream(cfg.seed, PHI_STREAM, 0),
    )
    return chain.draws, {
        "phi_stage": "rwm",
        "phi_acceptance": chain.meta["acceptance"],
        **({"phi_warning": chain.meta["warning"]} if "warning" in chain.meta else {}),
    }


def sample_cut(
    sys: TwoModuleSystem,
    S: int,
    strategy: CutStrategy,
    cfg: McmcConfig,
    *,
    threads: int | None = None,
    include_prior: bool = True,
) -> SampleSet:
    """
    Sequential cut sampler: phi ~ pi_cut(phi | z), then eta ~ pi(eta | w, phi).

    The phi stage only reads module one. Each eta draw uses its own substream
    derived from (seed, s), so the output does not depend on ``threads``.
    Draws whose inner solve fails are replaced by fresh phi draws; more than
    5% failures aborts.
    """
    if S < 1:
        raise ValueError(f"sample_cut: S must be >= 1, got {S}")
    n_spare = int(math.floor(FAILURE_BUDGET * S)) + 1
    phis, meta = _phi_stage(sys, S + n_spare, cfg)
    logger.info("phi stage done (%s, %d draws)", meta["phi_stage"], S)

    anchor = phis[:S].mean(axis=0)
    init = None
    try:
        warm = solve_conditional_mode(sys, anchor, include_prior=include_prior)
        init = warm.eta_hat if warm.converged else None
    except NumericalError as exc:
        logger.info("no warm start for the eta stage (%s)", exc)

    def draw(s: int) -> np.ndarray | None:
        try:
            eta, solved = conditional_stage(
                sys,
                phis[s],
                strategy,
                substream(cfg.seed, ETA_STREAM, s),
                init=init,
                include_prior=include_prior,
            )
        except (NumericalError, ValueError) as exc:
            logger.debug("eta stage failed at draw %d: %s", s, exc)
            return None
        return eta

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            etas = list(pool.map(draw, range(S)))
    else:
        etas = [draw(s) for s in range(S)]

    rows = list(range(S))
    failures = 0
    spare = S
    for s in range(S):
        while etas[s] is None:
            failures += 1
            if failures > FAILURE_BUDGET * S or spare >= S + n_spare:
                raise FailureBudgetExceeded(failures, S, "sample_cut")
            logger.warning("inner solve failed for draw %d; redrawing phi", s)
            rows[s] = spare
            etas[s] = draw(spare)
            spare += 1

    draws = np.hstack([phis[rows], np.vstack(etas)])
    meta.update(
        {
            "seed": cfg.seed,
            "S": S,
            "strategy": strategy.variant,
            "failures": failures,
            "include_prior": include_prior,
        }
    )
    if strategy.variant == "sir_t_proposal":
        meta.update({"sir_proposals": strategy.sir_proposals, "t_dof": strategy.t_dof})
    elif strategy.variant == "nested_mcmc":
        meta.update(
            {"nested_steps": strategy.nested_steps, "nested_burn_in": strategy.nested_burn_in}
        )
    logger.info("eta stage done (%s, %d failures)", strategy.variant, failures)
    return SampleSet(draws, sys.names, "cut", meta)


def full_preconditioner(sys: TwoModuleSystem) -> tuple[np.ndarray, np.ndarray]:
    """
    Start point (phi_hat, eta_hat) and proposal covariance for the joint chain:
    block-diagonal cut Laplace covariance scaled by 2.38^2 / d.
    """
    phi_hat = phi_mode(sys).x
    d = sys.d_phi + sys.d_eta
    phi_cov = np.linalg.inv(sys.nu * sys.module1.hessian(phi_hat)) if sys.nu > 0 else None
    if phi_cov is None or not np.all(np.linalg.eigvalsh(phi_cov) > 0):
        phi_cov = np.diag(np.maximum(np.abs(phi_hat), 1e-3) ** 2 * 1e-2)
    normal = conditional_laplace(sys, phi_hat)
    cov = np.zeros((d, d))
    cov[: sys.d_phi, : sys.d_phi] = phi_cov
    cov[sys.d_phi :, sys.d_phi :] = normal.covariance
    return np.concatenate([phi_hat, normal.mean]), cov * 2.38**2 / d


def sample_full(
    sys: TwoModuleSystem,
    S: int,
    cfg: McmcConfig,
    *,
    precondition: bool = True,
) -> SampleSet:
    """Joint random-walk Metropolis on the generalized posterior."""
    if S < 1:
        raise ValueError(f"sample_full: S must be >= 1, got {S}")
    chain_cfg = cfg.for_draws(S)
    init = np.concatenate([sys.default_phi_init(), np.zeros(sys.d_eta)])
    init[sys.d_phi :] = sys.default_eta_init(init[: sys.d_phi])
    cov = None
    if precondition:
        try:
            init, cov = full_preconditioner(sys)
            chain_cfg = replace(chain_cfg, proposal_scale=1.0)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            logger.info("sample_full: no preconditioner (%s)", exc)
    chain = rwm_chain(
        lambda t: log_generalized_posterior(sys, t),
        init,
        chain_cfg,
        proposal_cov=cov,
        names=sys.names,
        source="full",
    )
    logger.info("full chain done, acceptance %.3f", chain.meta["acceptance"])
    return replace(chain, meta={**chain.meta, "S": S, "preconditioned": cov is not None})
