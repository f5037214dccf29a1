from __future__ import annotations

import json
import os
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError
from .hashing import sha256_text
from .samplers import CUT_VARIANTS
from .semimodular import ETA_STAR_RULES

TASKS = ("cut", "full", "smi", "calibrate", "diagnose")
MODELS = ("hpv", "re", "custom")
PROPAGATION_METHODS = ("laplace", "nested_mcmc")
ARTIFACTS_ENV = "CUT_POSTERIOR_ARTIFACTS_DIR"


@dataclass(frozen=True, slots=True)
class ModelConfig:
    name: str = "hpv"
    # CSV in the HpvData / ReData layout; empty means simulate
    data: str = ""
    plugin: str = ""
    loss2: str = ""
    quasi_lambda: float = 1.0
    kappa: float = 5.0
    nu: float = 1.0
    nu_prime: float = 1.0
    sim_seed: int = 0
    n_countries: int = 13
    N: int = 100
    J: int = 10
    psi: float = 1.0
    phi: float = 0.5
    beta1: float = 10.0


@dataclass(frozen=True, slots=True)
class SamplingConfig:
    S: int = 1000
    seed: int = 0
    strategy: str = "conditional_normal"
    sir_proposals: int = 1000
    t_dof: float = 5.0
    nested_steps: int = 500
    nested_burn_in: int = 200
    threads: int = 1
    include_prior: bool = True


@dataclass(frozen=True, slots=True)
class McmcSection:
    burn_in: int = 1000
    thin: int = 1
    proposal_scale: float = 0.1
    adapt: bool = True


@dataclass(frozen=True, slots=True)
class SmiSection:
    gamma: float | None = None
    eta_star_rule: str = "mode"
    eta_star: tuple[float, ...] | None = None
    attach_eta: bool = True


@dataclass(frozen=True, slots=True)
class CalibrationSection:
    bootstrap: bool = False
    B: int = 1000
    seed: int = 0
    eta_mask: tuple[str, ...] | None = None
    calibrate_nu: bool = True


@dataclass(frozen=True, slots=True)
class DiagnoseSection:
    samples: str = ""
    method: str = "laplace"
    alpha: float = 0.05
    K: int = 10_000
    quantiles: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    ellipses: bool = True


@dataclass(frozen=True, slots=True)
class OutputsConfig:
    artifacts_dir: str = "artifacts"


_SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "sampling": SamplingConfig,
    "mcmc": McmcSection,
    "smi": SmiSection,
    "calibration": CalibrationSection,
    "diagnose": DiagnoseSection,
    "outputs": OutputsConfig,
}


def _as_bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    raise ValueError(f"expected true/false, got {v!r}")


def _opt(kind: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda v: None if v is None else kind(v)


def _floats(v: Any) -> tuple[float, ...]:
    return tuple(float(x) for x in v)


def _strs(v: Any) -> tuple[str, ...]:
    if isinstance(v, str):
        raise ValueError(f"expected a list of names, got the string {v!r}")
    return tuple(str(x) for x in v)


_KINDS: dict[str, Callable[[Any], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _as_bool,
    "float | None": _opt(float),
    "tuple[float, ...]": _floats,
    "tuple[float, ...] | None": _opt(_floats),
    "tuple[str, ...] | None": _opt(_strs),
}


def _build_section(name: str, cls: type, raw: Any) -> Any:
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name}: expected a table, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key (known: {sorted(known)})")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        kind = _KINDS[str(known[key].type)]
        try:
            kwargs[key] = kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}.{key}: {exc}") from None
    return cls(**kwargs)


@dataclass(frozen=True, slots=True)
class RunConfig:
    task: str = "cut"
    model: ModelConfig = field(default_factory=ModelConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    mcmc: McmcSection = field(default_factory=McmcSection)
    smi: SmiSection = field(default_factory=SmiSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    outputs: OutputsConfig = field(default_factory=OutputsConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raise ConfigError naming the first offending field."""
        if self.task not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {self.task!r}")
        m, s, mc = self.model, self.sampling, self.mcmc
        if m.name not in MODELS:
            raise ConfigError(f"model.name: must be one of {MODELS}, got {m.name!r}")
        if m.name == "custom" and ":" not in m.plugin:
            raise ConfigError("model.plugin: 'module:function' required when model.name='custom'")
        allowed_loss = {"hpv": ("", "poisson", "quasi"), "re": ("", "gaussian", "tukey")}
        if m.name in allowed_loss and m.loss2 not in allowed_loss[m.name]:
            raise ConfigError(
                f"model.loss2: must be one of {allowed_loss[m.name][1:]} for "
                f"model.name={m.name!r}, got {m.loss2!r}"
            )
        if not m.quasi_lambda > 0:
            raise ConfigError(f"model.quasi_lambda: must be > 0, got {m.quasi_lambda}")
        if not m.kappa > 0:
            raise ConfigError(f"model.kappa: must be > 0, got {m.kappa}")
        for key in ("nu", "nu_prime"):
            if not getattr(m, key) >= 0:
                raise ConfigError(f"model.{key}: must be >= 0, got {getattr(m, key)}")
        if m.name == "re" and not m.data and not (m.N >= 1 and m.J >= 2):
            raise ConfigError(f"model.N/model.J: need N >= 1 and J >= 2, got {m.N}, {m.J}")
        if s.S < 1:
            raise ConfigError(f"sampling.S: must be >= 1, got {s.S}")
        if s.strategy not in CUT_VARIANTS:
            raise ConfigError(f"sampling.strategy: must be one of {CUT_VARIANTS}, got {s.strategy!r}")
        if s.threads < 1:
            raise ConfigError(f"sampling.threads: must be >= 1, got {s.threads}")
        if mc.burn_in < 0 or mc.thin < 1 or not mc.proposal_scale > 0:
            raise ConfigError(
                "mcmc: need burn_in >= 0, thin >= 1 and proposal_scale > 0, got "
                f"{mc.burn_in}, {mc.thin}, {mc.proposal_scale}"
            )
        if self.task == "smi":
            if self.smi.gamma is None:
                raise ConfigError("smi.gamma: required when task='smi'")
            if not 0.0 <= self.smi.gamma <= 1.0:
                raise ConfigError(f"smi.gamma: must be in [0, 1], got {self.smi.gamma}")
        elif self.smi.gamma is not None:
            raise ConfigError(f"smi.gamma: only valid when task='smi' (task={self.task!r})")
        if self.smi.eta_star_rule not in ETA_STAR_RULES:
            raise ConfigError(
                f"smi.eta_star_rule: must be one of {ETA_STAR_RULES}, got {self.smi.eta_star_rule!r}"
            )
        if self.smi.eta_star_rule == "supplied" and self.smi.eta_star is None:
            raise ConfigError("smi.eta_star: required when smi.eta_star_rule='supplied'")
        if self.calibration.B < 1:
            raise ConfigError(f"calibration.B: must be >= 1, got {self.calibration.B}")
        if self.calibration.bootstrap and m.name != "re":
            raise ConfigError("calibration.bootstrap: only the 're' model has raw grouped data")
        d = self.diagnose
        if self.task == "diagnose" and not d.samples:
            raise ConfigError("diagnose.samples: required when task='diagnose'")
        if d.method not in PROPAGATION_METHODS:
            raise ConfigError(f"diagnose.method: must be one of {PROPAGATION_METHODS}, got {d.method!r}")
        if not 0.0 < d.alpha < 1.0:
            raise ConfigError(f"diagnose.alpha: must be in (0, 1), got {d.alpha}")
        if d.K < 1:
            raise ConfigError(f"diagnose.K: must be >= 1, got {d.K}")
        if not all(0.0 <= q <= 1.0 for q in d.quantiles):
            raise ConfigError(f"diagnose.quantiles: must lie in [0, 1], got {list(d.quantiles)}")

    def to_public_dict(self) -> dict[str, Any]:
        """JSON-serializable dict; ``from_mapping`` on it returns an equal config."""
        return json.loads(json.dumps(asdict(self)))

    def schema_hash(self) -> str:
        canonical = json.dumps(
            self.to_public_dict(),
            ensure_ascii=False,
            sort_keys=True,
            separators=(",", ":"),
        )
        return "sha256:" + sha256_text(canonical)

    def with_env_overrides(self, environ: Mapping[str, str] | None = None) -> "RunConfig":
        """Only the artifacts directory may come from the environment."""
        env = os.environ if environ is None else environ
        override = env.get(ARTIFACTS_ENV)
        if not override:
            return self
        return replace(self, outputs=replace(self.outputs, artifacts_dir=override))

    @classmethod
    def from_toml(cls, path: Path) -> "RunConfig":
        """
        TOML layout:
            task = "cut"
            [model]
            name = "hpv"
            [sampling]
            S = 1000
            seed = 7
        """
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_mapping(data)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(_SECTIONS) - {"task"})
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown section (known: task, {sorted(_SECTIONS)})")
        sections = {
            name: _build_section(name, kind, data.get(name)) for name, kind in _SECTIONS.items()
        }
        return cls(task=str(data.get("task", "cut")), **sections)
