from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import SingularInformationError, SolverError
from .laplace import phi_mode
from .model import NEG_INF, TwoModuleSystem
from .optimize import maximize, solve_conditional_mode
from .samplers import substream

logger = logging.getLogger(__name__)

MIN_BOOTSTRAP = 50
BOOT_STREAM = 2


def fisher_matching_rate(Sigma: np.ndarray, Psi: np.ndarray) -> float:
    """tr(Sigma Psi^{-1} Sigma) / tr(Sigma)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    Psi = np.atleast_2d(np.asarray(Psi, dtype=np.float64))
    # a vanishing Psi can still be well conditioned, so also compare its scale to Sigma's
    degenerate = not np.all(np.isfinite(Psi)) or np.linalg.cond(Psi) > 1e12
    if not degenerate:
        floor = 1e-10 * max(abs(float(np.trace(Sigma))) / Sigma.shape[0], 1e-300)
        degenerate = float(np.linalg.eigvalsh(0.5 * (Psi + Psi.T))[0]) <= floor
    if degenerate:
        raise SingularInformationError(
            "gradient covariance Psi is singular; with one parameter per observation "
            "the plug-in estimate vanishes at the mode, use calibrate_nu2_bootstrap "
            "(or calibration.bootstrap = true) with the raw grouped data"
        )
    tr = float(np.trace(Sigma))
    if tr <= 0:
        raise SingularInformationError(f"tr(Sigma) = {tr:.6g} is not positive")
    return float(np.trace(Sigma @ np.linalg.solve(Psi, Sigma))) / tr


@dataclass(frozen=True, slots=True)
class CalibrationReport:
    nu: float
    nu_prime: float
    Sigma11: np.ndarray | None
    Psi11: np.ndarray | None
    Sigma22: np.ndarray
    Psi22: np.ndarray
    phi_hat: np.ndarray
    eta_hat: np.ndarray
    eta_mask: tuple[str, ...]
    method: str = "plugin"
    B: int | None = None
    seed: int | None = None

    def to_public_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {
            k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()
        } | {"eta_mask": list(self.eta_mask)}

    def to_json(self, path: Path | None = None) -> str:
        text = json.dumps(self.to_public_dict(), ensure_ascii=False, indent=2) + "\n"
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        return text


def _mask_index(sys: TwoModuleSystem, eta_mask: Sequence[str] | None) -> np.ndarray:
    if eta_mask is None:
        return np.arange(sys.d_eta)
    unknown = [n for n in eta_mask if n not in sys.eta_names]
    if unknown:
        raise ValueError(f"eta_mask names not in the model: {unknown}")
    return np.array([sys.eta_names.index(n) for n in eta_mask], dtype=int)


def calibration_point(
    sys: TwoModuleSystem, eta_mask: Sequence[str] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    (phi_hat, eta_hat) for Fisher matching.

    phi_hat maximizes L. eta_hat starts at the conditional mode at phi_hat and
    then maximizes M alone over the masked coordinates, the rest held fixed.
    """
    phi_hat = phi_mode(sys).x
    start = solve_conditional_mode(sys, phi_hat)
    if not start.converged:
        raise SolverError("conditional mode at phi_hat did not converge")
    idx = _mask_index(sys, eta_mask)
    base = start.eta_hat.copy()
    m2, prior = sys.module2, sys.prior_eta

    def full(sub: np.ndarray) -> np.ndarray:
        e = base.copy()
        e[idx] = sub
        return e

    def f(sub: np.ndarray) -> float:
        e = full(sub)
        if not prior.support_check(e, phi_hat):
            return NEG_INF
        return -m2.total(e, phi_hat)

    res = maximize(
        f,
        base[idx],
        lambda sub: -m2.gradient(full(sub), phi_hat)[idx],
        lambda sub: -m2.hessian(full(sub), phi_hat)[np.ix_(idx, idx)],
        n_scale=m2.n_obs,
    )
    if not res.converged:
        raise SolverError(
            f"maximizing M over {len(idx)} coordinates did not converge "
            f"(grad_norm={res.grad_norm:.3g})"
        )
    return phi_hat, full(res.x)


def calibrate(
    sys: TwoModuleSystem,
    *,
    eta_mask: Sequence[str] | None = None,
    calibrate_nu: bool = True,
) -> CalibrationReport:
    """
    Learning rates by Fisher-information matching.

    Sigma blocks are loss Hessians over n and Psi blocks are averaged outer
    products of per-observation loss gradients, all at the calibration point.
    With ``calibrate_nu=False`` module one keeps ``sys.nu``.
    """
    phi_hat, eta_hat = calibration_point(sys, eta_mask)
    idx = _mask_index(sys, eta_mask)
    m1, m2 = sys.module1, sys.module2

    S11 = P11 = None
    nu = sys.nu
    if calibrate_nu:
        n1 = m1.n_obs
        S11 = m1.hessian(phi_hat) / n1
        G1 = m1.obs_gradients(phi_hat)
        P11 = G1.T @ G1 / n1
        nu = fisher_matching_rate(S11, P11)

    n2 = m2.n_obs
    S22 = m2.hessian(eta_hat, phi_hat)[np.ix_(idx, idx)] / n2
    G2 = m2.obs_gradients(eta_hat, phi_hat)[:, idx]
    P22 = G2.T @ G2 / n2
    nu_prime = fisher_matching_rate(S22, P22)
    logger.info("calibrated nu=%.4g nu'=%.4g", nu, nu_prime)
    return CalibrationReport(
        nu=nu,
        nu_prime=nu_prime,
        Sigma11=S11,
        Psi11=P11,
        Sigma22=S22,
        Psi22=P22,
        phi_hat=phi_hat,
        eta_hat=eta_hat,
        eta_mask=tuple(sys.eta_names[i] for i in idx),
    )


def _group_codes(raw: pd.DataFrame, group_index: str, n_groups: int) -> np.ndarray:
    if group_index not in raw.columns:
        raise ValueError(f"group column {group_index!r} not in raw table {list(raw.columns)}")
    codes, uniques = pd.factorize(raw[group_index], sort=True)
    if len(uniques) != n_groups:
        raise ValueError(
            f"raw table has {len(uniques)} groups but module two has {n_groups} observations"
        )
    return codes


def calibrate_nu2_bootstrap(
    sys: TwoModuleSystem,
    raw: pd.DataFrame,
    group_index: str,
    B: int = 1000,
    seed: int = 0,
    *,
    columns: Mapping[str, str] | None = None,
    eta_mask: Sequence[str] | None = None,
    uniform: bool = False,
) -> CalibrationReport:
    """
    nu' with Psi22 from a Bayesian bootstrap over the raw rows of each group.

    Replicate b draws Dirichlet(1, ..., 1) weights over the rows of every
    group, rebuilds the module-two observation columns as weighted group
    means (``columns`` maps module-two column -> raw column, default shared
    names) and averages the plug-in Psi22 across replicates. ``uniform=True``
    uses equal weights and reproduces the plug-in estimate.
    """
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    if B < MIN_BOOTSTRAP:
        warnings.warn(
            f"only {B} bootstrap replicates (< {MIN_BOOTSTRAP}); Psi22 will be noisy",
            RuntimeWarning,
            stacklevel=2,
        )
    m2 = sys.module2
    n2 = m2.n_obs
    codes = _group_codes(raw, group_index, n2)
    if columns is None:
        columns = {c: c for c in m2.data.columns if c in raw.columns and c != group_index}
    if not columns:
        raise ValueError("no module-two column can be rebuilt from the raw table")
    values = {c: raw[src].to_numpy(dtype=np.float64) for c, src in columns.items()}

    phi_hat, eta_hat = calibration_point(sys, eta_mask)
    idx = _mask_index(sys, eta_mask)
    S22 = m2.hessian(eta_hat, phi_hat)[np.ix_(idx, idx)] / n2

    P22 = np.zeros((idx.size, idx.size))
    for b in range(B):
        if uniform:
            wts = np.ones(codes.size)
        else:
            wts = substream(seed, BOOT_STREAM, b).standard_exponential(codes.size)
        denom = np.bincount(codes, weights=wts, minlength=n2)
        data = m2.data.copy()
        for c, v in values.items():
            data[c] = np.bincount(codes, weights=wts * v, minlength=n2) / denom
        G = replace(m2, data=data).obs_gradients(eta_hat, phi_hat)[:, idx]
        P22 += G.T @ G / n2
    P22 /= B

    nu_prime = fisher_matching_rate(S22, P22)
    logger.info("bootstrap nu'=%.4g (B=%d)", nu_prime, B)
    return CalibrationReport(
        nu=sys.nu,
        nu_prime=nu_prime,
        Sigma11=None,
        Psi11=None,
        Sigma22=S22,
        Psi22=P22,
        phi_hat=phi_hat,
        eta_hat=eta_hat,
        eta_mask=tuple(sys.eta_names[i] for i in idx),
        method="uniform" if uniform else "bayesian_bootstrap",
        B=B,
        seed=seed,
    )
