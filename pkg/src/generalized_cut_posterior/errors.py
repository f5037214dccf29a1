from __future__ import annotations


class CutPosteriorError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(CutPosteriorError, ValueError):
    """Invalid run configuration; the message names the offending field."""


class NumericalError(CutPosteriorError, RuntimeError):
    """A numerical step failed in a way the caller should not ignore."""


class PathologicalLossError(NumericalError):
    """A loss returned a non-finite value at an in-support parameter."""


class SolverError(NumericalError):
    """An inner optimization did not converge."""


class IndefiniteHessianError(NumericalError):
    def __init__(self, eigenvalue: float, where: str = "") -> None:
        self.eigenvalue = float(eigenvalue)
        suffix = f" at {where}" if where else ""
        super().__init__(
            f"curvature matrix is not positive definite{suffix}: "
            f"smallest eigenvalue {self.eigenvalue:.6g} after jitter repair"
        )


class SingularInformationError(NumericalError):
    """An information or gradient-covariance block could not be inverted."""


class FailureBudgetExceeded(NumericalError):
    def __init__(self, failures: int, total: int, stage: str) -> None:
        self.failures = failures
        self.total = total
        super().__init__(
            f"{stage}: {failures} of {total} inner solves failed "
            f"({failures / max(total, 1):.1%} > 5% budget)"
        )
