from __future__ import annotations

from .calibration import CalibrationReport, calibrate, calibrate_nu2_bootstrap
from .config import RunConfig
from .errors import ConfigError, CutPosteriorError, NumericalError
from .laplace import ConditionalNormal, JointNormal, conditional_laplace, joint_laplace
from .model import (
    LogPrior,
    LossModule,
    ParamVector,
    TwoModuleSystem,
    log_conditional_eta,
    log_cut_marginal_phi,
    log_generalized_posterior,
)
from .samplers import CutStrategy, McmcConfig, sample_cut, sample_full
from .samples import SampleSet
from .semimodular import SmiConfig, sample_smi

__all__ = [
    "CalibrationReport",
    "ConditionalNormal",
    "ConfigError",
    "CutPosteriorError",
    "CutStrategy",
    "JointNormal",
    "LogPrior",
    "LossModule",
    "McmcConfig",
    "NumericalError",
    "ParamVector",
    "RunConfig",
    "SampleSet",
    "SmiConfig",
    "TwoModuleSystem",
    "__version__",
    "calibrate",
    "calibrate_nu2_bootstrap",
    "conditional_laplace",
    "joint_laplace",
    "log_conditional_eta",
    "log_cut_marginal_phi",
    "log_generalized_posterior",
    "sample_cut",
    "sample_full",
    "sample_smi",
]

# Keep version in sync with pyproject.toml for releases.
__version__ = "0.1.0"
