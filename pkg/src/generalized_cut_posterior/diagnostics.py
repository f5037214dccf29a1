from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import FailureBudgetExceeded, NumericalError
from .laplace import ConditionalNormal, conditional_laplace
from .model import ArrayLike, TwoModuleSystem, log_conditional_eta
from .optimize import solve_conditional_mode
from .samplers import (
    ETA_STREAM,
    FAILURE_BUDGET,
    CutStrategy,
    McmcConfig,
    rwm_chain,
    substream,
)
from .samples import SampleSet

logger = logging.getLogger(__name__)

LOGDET_QUANTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
ELLIPSE_POINTS = 128


@dataclass(frozen=True, slots=True)
class PropagationTable:
    """Per-draw conditional summaries of eta | phi, one row per retained phi draw."""

    phi: np.ndarray
    mu: np.ndarray
    sigma_diag: np.ndarray
    logdet: np.ndarray
    phi_names: tuple[str, ...]
    eta_names: tuple[str, ...]
    method: str = "laplace"
    failures: int = 0

    def __post_init__(self) -> None:
        if np.any(self.sigma_diag <= 0):
            raise ValueError("PropagationTable: conditional variances must be positive")

    @property
    def S(self) -> int:
        return int(self.mu.shape[0])

    def to_frame(self) -> pd.DataFrame:
        cols: dict[str, np.ndarray] = {"s": np.arange(1, self.S + 1)}
        cols |= {n: self.phi[:, i] for i, n in enumerate(self.phi_names)}
        cols |= {f"mu_{n}": self.mu[:, i] for i, n in enumerate(self.eta_names)}
        cols |= {f"var_{n}": self.sigma_diag[:, i] for i, n in enumerate(self.eta_names)}
        cols["logdet"] = self.logdet
        return pd.DataFrame(cols)

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
        return path


def _phi_matrix(sys: TwoModuleSystem, phi_draws: SampleSet | np.ndarray) -> np.ndarray:
    if isinstance(phi_draws, SampleSet):
        return phi_draws.select(sys.phi_names).draws
    arr = np.atleast_2d(np.asarray(phi_draws, dtype=np.float64))
    if arr.shape[1] != sys.d_phi:
        raise ValueError(f"phi draws have {arr.shape[1]} columns, expected {sys.d_phi}")
    return arr


def _nested_summary(
    sys: TwoModuleSystem,
    phi: np.ndarray,
    normal: ConditionalNormal,
    strategy: CutStrategy,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float]:
    chain = rwm_chain(
        lambda e: log_conditional_eta(sys, e, phi),
        normal.mean,
        McmcConfig(
            steps=strategy.nested_steps,
            burn_in=strategy.nested_burn_in,
            proposal_scale=1.0,
        ),
        proposal_cov=normal.covariance * 2.38**2 / normal.dim,
        source="conditional",
        rng=rng,
    )
    x = chain.draws
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalError("nested chain produced a degenerate covariance")
    return x.mean(axis=0), np.diag(cov).copy(), float(logdet)


def propagation_table(
    sys: TwoModuleSystem,
    phi_draws: SampleSet | np.ndarray,
    *,
    method: str = "laplace",
    strategy: CutStrategy | None = None,
    seed: int = 0,
    threads: int | None = None,
) -> PropagationTable:
    """
    Conditional mean mu(phi_s), variances and log det covariance of eta | phi_s.

    ``method="laplace"`` uses the conditional normal approximation;
    ``method="nested_mcmc"`` runs a short chain per draw instead.
    """
    if method not in ("laplace", "nested_mcmc"):
        raise ValueError(f"method must be 'laplace' or 'nested_mcmc', got {method!r}")
    phis = _phi_matrix(sys, phi_draws)
    S = phis.shape[0]
    strategy = strategy or CutStrategy(variant="nested_mcmc")
    warm = None
    try:
        anchor = solve_conditional_mode(sys, phis.mean(axis=0))
        warm = anchor.eta_hat if anchor.converged else None
    except NumericalError as exc:
        logger.info("no warm start for the propagation table (%s)", exc)

    def row(s: int) -> tuple[np.ndarray, np.ndarray, float] | None:
        try:
            normal = conditional_laplace(sys, phis[s], init=warm)
            if method == "laplace":
                return normal.mean, np.diag(normal.covariance).copy(), normal.log_det_covariance()
            return _nested_summary(sys, phis[s], normal, strategy, substream(seed, ETA_STREAM, s))
        except (NumericalError, ValueError) as exc:
            logger.debug("propagation row %d failed: %s", s, exc)
            return None

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(S)))
    else:
        rows = [row(s) for s in range(S)]

    keep = [s for s, r in enumerate(rows) if r is not None]
    failures = S - len(keep)
    if failures > FAILURE_BUDGET * S:
        raise FailureBudgetExceeded(failures, S, "propagation_table")
    return PropagationTable(
        phi=phis[keep],
        mu=np.vstack([rows[s][0] for s in keep]),
        sigma_diag=np.vstack([rows[s][1] for s in keep]),
        logdet=np.array([rows[s][2] for s in keep]),
        phi_names=sys.phi_names,
        eta_names=sys.eta_names,
        method=method,
        failures=failures,
    )


def total_variance_decomposition(
    table: PropagationTable, phi_draws: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """(E[Var(eta|phi)], Var(E[eta|phi])) componentwise."""
    if phi_draws is not None and np.atleast_2d(phi_draws).shape[0] != table.S:
        raise ValueError(
            f"phi_draws has {np.atleast_2d(phi_draws).shape[0]} rows, table has {table.S}"
        )
    if table.S < 2:
        raise ValueError("total_variance_decomposition needs at least 2 rows")
    return table.sigma_diag.mean(axis=0), table.mu.var(axis=0, ddof=1)


def third_cumulant_decomposition(
    table: PropagationTable, phi_draws: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    Terms two and three of the third central moment of eta:
    E[(mu - E mu)^3] and 3 Cov(mu, Var(eta|phi)). Term one is zero under a
    normal conditional. Both are unbiased sample estimates, like the terms of
    ``total_variance_decomposition``.
    """
    if phi_draws is not None and np.atleast_2d(phi_draws).shape[0] != table.S:
        raise ValueError("phi_draws and table disagree on the number of rows")
    S = table.S
    if S < 3:
        raise ValueError("third_cumulant_decomposition needs at least 3 rows")
    mu_c = table.mu - table.mu.mean(axis=0)
    sig_c = table.sigma_diag - table.sigma_diag.mean(axis=0)
    term2 = S * np.sum(mu_c**3, axis=0) / ((S - 1) * (S - 2))
    term3 = 3.0 * np.sum(mu_c * sig_c, axis=0) / (S - 1)
    return term2, term3


@dataclass(frozen=True, slots=True)
class CredibleSetResult:
    retained: np.ndarray
    whitened: np.ndarray
    fraction: float
    threshold: float
    alpha: float


def _sym_sqrt(P: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(P)
    return (vecs * np.sqrt(vals)) @ vecs.T


def credible_set_mc(
    sys: TwoModuleSystem | None,
    phi: ArrayLike | None,
    alpha: float,
    K: int,
    seed: int,
    *,
    normal: ConditionalNormal | None = None,
) -> CredibleSetResult:
    """
    Monte Carlo (1 - alpha) credible set of the conditional normal at phi.

    Draws Z_k ~ N(eta_hat, precision^{-1}), whitens with the symmetric square
    root of the precision and keeps ||Y_k||^2 <= chi2_{d}(1 - alpha).
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if normal is None:
        if sys is None or phi is None:
            raise ValueError("credible_set_mc needs (sys, phi) or normal")
        normal = conditional_laplace(sys, phi)
    rng = np.random.default_rng(seed)
    Z = normal.sample(rng, K)
    Y = (Z - normal.mean) @ _sym_sqrt(normal.precision)
    q = float(stats.chi2.ppf(1.0 - alpha, normal.dim))
    r2 = np.einsum("ij,ij->i", Y, Y)
    mask = r2 <= q if q > 0 else np.zeros(K, dtype=bool)
    return CredibleSetResult(
        retained=Y[mask], whitened=Y, fraction=float(mask.mean()), threshold=q, alpha=alpha
    )


def wasserstein1_1d(a: ArrayLike, b: ArrayLike) -> float:
    """Wasserstein-1 distance between two empirical distributions on the line."""
    x = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    y = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if x.size == 0 or y.size == 0:
        raise ValueError("wasserstein1_1d: both samples must be nonempty")
    if x.size == y.size:
        return float(np.mean(np.abs(x - y)))
    return float(stats.wasserstein_distance(x, y))


def ellipse_polyline(
    normal: ConditionalNormal, alpha: float = 0.05, n_points: int = ELLIPSE_POINTS
) -> np.ndarray:
    """Boundary of the (1 - alpha) ellipse of a 2-D conditional normal, (n_points, 2)."""
    if normal.dim != 2:
        raise ValueError(f"ellipse_polyline needs a 2-D eta, got dimension {normal.dim}")
    r = math.sqrt(float(stats.chi2.ppf(1.0 - alpha, 2)))
    t = np.linspace(0.0, 2.0 * math.pi, n_points)
    circle = r * np.vstack([np.cos(t), np.sin(t)])
    pts = linalg.solve_triangular(normal.chol, circle, trans="T", lower=True)
    return normal.mean + pts.T


def ellipses_frame(
    sys: TwoModuleSystem,
    phi_rows: np.ndarray,
    alpha: float = 0.05,
    n_points: int = ELLIPSE_POINTS,
) -> pd.DataFrame:
    """Stacked ellipse polylines with columns (s, x, y)."""
    frames = []
    for s, phi in enumerate(np.atleast_2d(phi_rows), start=1):
        pts = ellipse_polyline(conditional_laplace(sys, phi), alpha, n_points)
        frames.append(pd.DataFrame({"s": s, "x": pts[:, 0], "y": pts[:, 1]}))
    return pd.concat(frames, ignore_index=True)


def select_by_logdet_quantiles(
    table: PropagationTable, quantiles: Sequence[float] = LOGDET_QUANTILES
) -> np.ndarray:
    """Row indices whose log det covariance is closest to each requested quantile."""
    targets = np.quantile(table.logdet, quantiles)
    return np.array([int(np.argmin(np.abs(table.logdet - q))) for q in targets])


def compare_marginals(
    a: SampleSet, b: SampleSet, names: Sequence[str] | None = None
) -> pd.DataFrame:
    """Per-column Wasserstein-1 and two-sample KS between two sample sets."""
    names = list(names) if names is not None else [n for n in a.names if n in b.names]
    rows = []
    for n in names:
        x, y = a.column(n), b.column(n)
        ks = stats.ks_2samp(x, y)
        rows.append(
            {
                "name": n,
                "mean_a": float(x.mean()),
                "mean_b": float(y.mean()),
                "wasserstein1": wasserstein1_1d(x, y),
                "ks_statistic": float(ks.statistic),
                "ks_pvalue": float(ks.pvalue),
            }
        )
    return pd.DataFrame(rows)


def interval_jaccard(
    a: SampleSet, b: SampleSet, ci: float = 0.95, names: Sequence[str] | None = None
) -> pd.Series:
    """Jaccard overlap of central credible intervals, per shared column."""
    names = list(names) if names is not None else [n for n in a.names if n in b.names]
    lo_q, hi_q = (1.0 - ci) / 2.0, (1.0 + ci) / 2.0
    out = {}
    for n in names:
        a_lo, a_hi = np.quantile(a.column(n), [lo_q, hi_q])
        b_lo, b_hi = np.quantile(b.column(n), [lo_q, hi_q])
        inter = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
        union = max(a_hi, b_hi) - min(a_lo, b_lo)
        out[n] = inter / union if union > 0 else 1.0
    return pd.Series(out, name="jaccard")
