from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FailureBudgetExceeded, NumericalError
from .laplace import conditional_laplace, marginal_laplace_phi
from .model import (
    NEG_INF,
    ArrayLike,
    TwoModuleSystem,
    as_array,
    log_conditional_eta,
    log_cut_marginal_phi,
)
from .optimize import InnerSolveCache, InnerSolveResult
from .samplers import (
    ETA_STREAM,
    FAILURE_BUDGET,
    CutStrategy,
    McmcConfig,
    conditional_stage,
    rwm_chain,
    substream,
)
from .samples import SampleSet

logger = logging.getLogger(__name__)

ETA_STAR_RULES = ("mode", "supplied")
MIN_BUDGET_CALLS = 100


@dataclass(frozen=True, slots=True)
class SmiConfig:
    gamma: float
    cfg: McmcConfig = field(default_factory=McmcConfig)
    eta_star_rule: str = "mode"
    eta_star: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"SmiConfig: gamma must be in [0, 1], got {self.gamma}")
        if self.eta_star_rule not in ETA_STAR_RULES:
            raise ValueError(
                f"SmiConfig: eta_star_rule must be one of {ETA_STAR_RULES}, "
                f"got {self.eta_star_rule!r}"
            )
        if self.eta_star_rule == "supplied" and self.eta_star is None:
            raise ValueError("SmiConfig: eta_star_rule='supplied' needs eta_star")
        if self.eta_star is not None:
            object.__setattr__(self, "eta_star", tuple(float(v) for v in self.eta_star))

    def star(self) -> np.ndarray | None:
        if self.eta_star_rule == "mode":
            return None
        return np.asarray(self.eta_star, dtype=np.float64)


def chib_log_mhat(
    sys: TwoModuleSystem,
    phi: ArrayLike,
    eta_star: ArrayLike | None = None,
    *,
    solved: InnerSolveResult | None = None,
) -> float:
    """
    ln m_eta(w | phi) by the basic marginal likelihood identity with the
    conditional normal plugged in for pi(eta* | w, phi):

        ln pi(eta*|phi) + nu' M(eta*, phi) - ln N(eta*; eta_hat, precision^{-1})

    eta* defaults to eta_hat. Exact whenever the conditional is Gaussian.
    """
    p = as_array(phi)
    normal = conditional_laplace(sys, p, solved=solved)
    star = normal.mean if eta_star is None else as_array(eta_star)
    kernel = log_conditional_eta(sys, star, p)
    if kernel == NEG_INF:
        raise ValueError(f"eta_star {star.tolist()} is outside the support of pi(eta|phi)")
    return kernel - normal.logpdf(star)


def log_smi_target(
    sys: TwoModuleSystem,
    phi: ArrayLike,
    gamma: float,
    *,
    eta_star: ArrayLike | None = None,
    cache: InnerSolveCache | None = None,
) -> float:
    """log pi_cut(phi | z) + gamma * ln m_hat(w | phi), unnormalized."""
    p = as_array(phi)
    base = log_cut_marginal_phi(sys, p)
    if base == NEG_INF or gamma == 0.0:
        return base
    solved = cache.solve(p) if cache is not None else None
    return base + gamma * chib_log_mhat(sys, p, eta_star, solved=solved)


def sample_smi(
    sys: TwoModuleSystem,
    smi_cfg: SmiConfig,
    *,
    S: int | None = None,
    strategy: CutStrategy | None = None,
    threads: int | None = None,
) -> SampleSet:
    """
    Metropolis chain on the marginal semi-modular target for phi.

    The acceptance ratio uses target(phi') / target(phi) only: the cut
    marginal already carries pi(phi). With ``strategy`` an eta draw is
    attached to every phi row from the conditional stage. Inner solves that
    fail on more than 5% of target evaluations abort the chain.
    """
    cfg = smi_cfg.cfg if S is None else smi_cfg.cfg.for_draws(S)
    gamma = smi_cfg.gamma
    star = smi_cfg.star()
    cache = InnerSolveCache(sys)
    calls = 0
    failed = 0

    def target(p: np.ndarray) -> float:
        nonlocal calls, failed
        calls += 1
        try:
            return log_smi_target(sys, p, gamma, eta_star=star, cache=cache)
        except (NumericalError, ValueError) as exc:
            failed += 1
            logger.debug("smi target rejected phi=%s: %s", np.round(p, 6).tolist(), exc)
            if failed > FAILURE_BUDGET * max(calls, MIN_BUDGET_CALLS):
                raise FailureBudgetExceeded(failed, calls, "sample_smi") from exc
            return NEG_INF

    init, cov = sys.default_phi_init(), None
    try:
        approx = marginal_laplace_phi(sys)
        init = approx.mean
        cov = approx.covariance * 2.38**2 / sys.d_phi
        cfg = replace(cfg, proposal_scale=1.0)
    except NumericalError as exc:
        logger.info("smi: no Laplace preconditioner (%s)", exc)

    chain = rwm_chain(target, init, cfg, proposal_cov=cov, names=sys.phi_names, source="smi")
    if failed > FAILURE_BUDGET * calls:
        raise FailureBudgetExceeded(failed, calls, "sample_smi")
    meta = {
        **chain.meta,
        "gamma": gamma,
        "eta_star_rule": smi_cfg.eta_star_rule,
        "solver_failures": failed,
        "cache_hits": cache.hits,
    }
    logger.info("smi chain done (gamma=%.3g, acceptance %.3f)", gamma, meta["acceptance"])
    if strategy is None:
        return replace(chain, meta=meta)

    phis = chain.draws
    warm = None
    try:
        anchor = cache.solve(phis.mean(axis=0))
        warm = anchor.eta_hat if anchor.converged else None
    except NumericalError as exc:
        logger.info("no warm start for the eta stage (%s)", exc)

    def draw(s: int) -> np.ndarray | None:
        try:
            eta, _ = conditional_stage(
                sys,
                phis[s],
                strategy,
                substream(cfg.seed, ETA_STREAM, s),
                init=warm,
            )
        except (NumericalError, ValueError):
            return None
        return eta

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            etas = list(pool.map(draw, range(len(phis))))
    else:
        etas = [draw(s) for s in range(len(phis))]
    keep = [s for s, e in enumerate(etas) if e is not None]
    dropped = len(phis) - len(keep)
    if dropped > math.floor(FAILURE_BUDGET * len(phis)):
        raise FailureBudgetExceeded(dropped, len(phis), "sample_smi")
    draws = np.hstack([phis[keep], np.vstack([etas[s] for s in keep])])
    meta.update({"strategy": strategy.variant, "eta_failures": dropped})
    return SampleSet(draws, sys.names, "smi", meta)
