from __future__ import annotations

import argparse
import importlib
import json
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .calibration import calibrate, calibrate_nu2_bootstrap
from .config import TASKS, ModelConfig, RunConfig
from .diagnostics import (
    credible_set_mc,
    ellipses_frame,
    propagation_table,
    select_by_logdet_quantiles,
    third_cumulant_decomposition,
    total_variance_decomposition,
)
from .errors import ConfigError, NumericalError
from .hashing import checksum_files
from .hpv import HpvData, hpv_system, simulate_hpv
from .model import TwoModuleSystem
from .paths import RunPaths
from .random_effects import ReData, beta_names, re_simulate, re_system
from .report import write_report_files
from .runlog import RunManifest
from .samplers import CutStrategy, McmcConfig, sample_cut, sample_full
from .samples import SampleSet
from .semimodular import SmiConfig, sample_smi
from .tables import summary_frame, utc_now_iso, write_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

ModelData = HpvData | ReData | None


def load_plugin(ref: str) -> Callable[[ModelConfig], TwoModuleSystem]:
    """Resolve ``"package.module:function"``; the function receives the model section."""
    module_name, _, attr = ref.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"model.plugin: expected 'module:function', got {ref!r}")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise ConfigError(f"model.plugin: cannot import {module_name!r} ({exc})") from None
    factory = getattr(module, attr, None)
    if not callable(factory):
        raise ConfigError(f"model.plugin: {module_name!r} has no callable {attr!r}")
    return factory


def _load_data(kind: type, path: Path) -> Any:
    try:
        return kind.from_csv(path)
    except ValueError as exc:
        raise ConfigError(f"model.data: {path}: {exc}") from None


def build_system(cfg: RunConfig, paths: RunPaths) -> tuple[TwoModuleSystem, ModelData]:
    m = cfg.model
    if m.name == "hpv":
        data = (
            _load_data(HpvData, paths.resolve_input(m.data))
            if m.data
            else simulate_hpv(m.n_countries, m.sim_seed)
        )
        sys_ = hpv_system(
            data, m.loss2 or "poisson", m.quasi_lambda, nu=m.nu, nu_prime=m.nu_prime
        )
        return sys_, data
    if m.name == "re":
        data = (
            _load_data(ReData, paths.resolve_input(m.data))
            if m.data
            else re_simulate(m.N, m.J, m.psi, m.phi, {0: m.beta1}, m.sim_seed)
        )
        sys_ = re_system(data, m.loss2 or "gaussian", m.kappa, nu=m.nu, nu_prime=m.nu_prime)
        return sys_, data
    sys_ = load_plugin(m.plugin)(m)
    if not isinstance(sys_, TwoModuleSystem):
        raise ConfigError(
            f"model.plugin: {m.plugin!r} returned {type(sys_).__name__}, not TwoModuleSystem"
        )
    return sys_, None


def check_against_system(cfg: RunConfig, sys_: TwoModuleSystem) -> None:
    """Config fields that can only be checked once the model is built."""
    mask = cfg.calibration.eta_mask
    if cfg.task == "calibrate" and mask is not None:
        unknown = [n for n in mask if n not in sys_.eta_names]
        if unknown:
            raise ConfigError(
                f"calibration.eta_mask: {unknown} not in the model's eta names "
                f"{list(sys_.eta_names)}"
            )
    star = cfg.smi.eta_star
    if cfg.task == "smi" and cfg.smi.eta_star_rule == "supplied" and star is not None:
        if len(star) != sys_.d_eta:
            raise ConfigError(
                f"smi.eta_star: expected {sys_.d_eta} values for {list(sys_.eta_names)}, "
                f"got {len(star)}"
            )


def mcmc_config(cfg: RunConfig) -> McmcConfig:
    mc, s = cfg.mcmc, cfg.sampling
    return McmcConfig(
        steps=mc.burn_in + s.S * mc.thin,
        burn_in=mc.burn_in,
        thin=mc.thin,
        proposal_scale=mc.proposal_scale,
        seed=s.seed,
        adapt=mc.adapt,
    )


def cut_strategy(cfg: RunConfig) -> CutStrategy:
    s = cfg.sampling
    return CutStrategy(
        variant=s.strategy,
        sir_proposals=s.sir_proposals,
        t_dof=s.t_dof,
        nested_steps=s.nested_steps,
        nested_burn_in=s.nested_burn_in,
    )


def _write_samples(samples: SampleSet, paths: RunPaths, manifest: RunManifest) -> dict[str, Any]:
    samples.to_csv(paths.samples_csv)
    summary = samples.summary()
    write_table(summary_frame(summary), paths.summary_csv)
    manifest.outputs.update(
        {
            "samples_csv": paths.samples_csv.name,
            "samples_meta": paths.samples_csv.stem + ".meta.json",
            "summary_csv": paths.summary_csv.name,
        }
    )
    manifest.stages["sampling"] = {
        k: v for k, v in samples.meta.items() if isinstance(v, (int, float, str, bool))
    }
    return {"S": samples.S, "summary": summary_frame(summary).to_dict("records")}


def _task_sampling(cfg, sys_, data, paths, manifest, threads) -> dict[str, Any]:
    S = cfg.sampling.S
    if cfg.task == "cut":
        samples = sample_cut(
            sys_,
            S,
            cut_strategy(cfg),
            mcmc_config(cfg),
            threads=threads,
            include_prior=cfg.sampling.include_prior,
        )
    elif cfg.task == "full":
        samples = sample_full(sys_, S, mcmc_config(cfg))
    else:
        smi = SmiConfig(
            gamma=float(cfg.smi.gamma),
            cfg=mcmc_config(cfg),
            eta_star_rule=cfg.smi.eta_star_rule,
            eta_star=cfg.smi.eta_star,
        )
        samples = sample_smi(
            sys_,
            smi,
            S=S,
            strategy=cut_strategy(cfg) if cfg.smi.attach_eta else None,
            threads=threads,
        )
    return _write_samples(samples, paths, manifest)


def _task_calibrate(cfg, sys_, data, paths, manifest, threads) -> dict[str, Any]:
    c = cfg.calibration
    eta_mask = c.eta_mask
    if eta_mask is None and isinstance(data, ReData):
        # psi does not enter the module-two loss
        eta_mask = beta_names(sys_)
    if c.bootstrap:
        if not isinstance(data, ReData):
            raise ConfigError("calibration.bootstrap: needs the 're' model's raw table")
        report = calibrate_nu2_bootstrap(
            sys_,
            data.raw_table(),
            "group",
            B=c.B,
            seed=c.seed,
            columns={"w": "y"},
            eta_mask=eta_mask,
        )
    else:
        report = calibrate(sys_, eta_mask=eta_mask, calibrate_nu=c.calibrate_nu)
    out = paths.task_dir / "calibration.json"
    report.to_json(out)
    manifest.outputs["calibration_json"] = out.name
    manifest.stages["calibration"] = {
        "method": report.method,
        "nu": report.nu,
        "nu_prime": report.nu_prime,
    }
    return {"calibration": report.to_public_dict()}


def _task_diagnose(cfg, sys_, data, paths, manifest, threads) -> dict[str, Any]:
    d = cfg.diagnose
    seed = cfg.sampling.seed
    samples = SampleSet.from_csv(paths.resolve_input(d.samples))
    if samples.S < 3:
        raise ConfigError(f"diagnose.samples: need at least 3 draws, got {samples.S}")
    table = propagation_table(
        sys_, samples, method=d.method, strategy=cut_strategy(cfg), seed=seed, threads=threads
    )
    prop_csv = table.to_csv(paths.task_dir / "propagation.csv")
    manifest.outputs["propagation_csv"] = prop_csv.name
    manifest.stages["propagation"] = {"method": d.method, "rows": table.S, "failures": table.failures}

    expected_var, var_mean = total_variance_decomposition(table)
    term2, term3 = third_cumulant_decomposition(table)
    eta_cols = [n for n in sys_.eta_names if n in samples.names]
    empirical = (
        samples.select(eta_cols).draws.var(axis=0, ddof=1) if samples.S > 1 and eta_cols else None
    )
    total_variance = {}
    for i, name in enumerate(sys_.eta_names):
        entry = {
            "mean_conditional_variance": float(expected_var[i]),
            "variance_of_conditional_mean": float(var_mean[i]),
            "third_cumulant_mean_term": float(term2[i]),
            "third_cumulant_covariance_term": float(term3[i]),
        }
        if empirical is not None and name in eta_cols:
            entry["empirical_variance"] = float(empirical[eta_cols.index(name)])
        total_variance[name] = entry

    picked = select_by_logdet_quantiles(table, d.quantiles)
    credible = []
    for j, row in enumerate(picked):
        res = credible_set_mc(sys_, table.phi[row], d.alpha, d.K, seed + j)
        credible.append(
            {
                "s": int(row) + 1,
                "quantile": float(d.quantiles[j]),
                "logdet": float(table.logdet[row]),
                "fraction": res.fraction,
                "threshold": res.threshold,
            }
        )
    if d.ellipses and sys_.d_eta == 2:
        frame = ellipses_frame(sys_, table.phi[picked], d.alpha)
        frame["s"] = picked[frame["s"].to_numpy() - 1] + 1
        write_table(frame, paths.task_dir / "ellipses.csv")
        manifest.outputs["ellipses_csv"] = "ellipses.csv"
    return {
        "diagnose": {
            "alpha": d.alpha,
            "K": d.K,
            "total_variance": total_variance,
            "credible_sets": credible,
        }
    }


_TASKS: dict[str, Callable[..., dict[str, Any]]] = {
    "cut": _task_sampling,
    "full": _task_sampling,
    "smi": _task_sampling,
    "calibrate": _task_calibrate,
    "diagnose": _task_diagnose,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    return EXIT_IO


def execute(
    cfg: RunConfig,
    *,
    root: Path,
    threads: int | None = None,
    command: str = "",
    config_path: Path | None = None,
) -> int:
    """Run one configured task and write its artifacts; returns the exit code."""
    cfg = cfg.with_env_overrides()
    paths = RunPaths.from_root(root, cfg)
    paths.ensure_dirs()
    workers = min(cfg.sampling.threads, threads) if threads else cfg.sampling.threads
    manifest = RunManifest(
        cfg=cfg,
        generated_utc=utc_now_iso(),
        command=command,
        schema_hash=cfg.schema_hash(),
        config_path=str(config_path) if config_path else None,
        threads=workers,
    )
    try:
        sys_, data = build_system(cfg, paths)
        check_against_system(cfg, sys_)
        manifest.stages["model"] = {
            "label": sys_.label,
            "d_phi": sys_.d_phi,
            "d_eta": sys_.d_eta,
            "n1": sys_.module1.n_obs,
            "n2": sys_.module2.n_obs,
        }
        if data is not None and not cfg.model.data:
            data_csv = paths.task_dir / "data.csv"
            data.to_csv(data_csv)
            manifest.outputs["data_csv"] = data_csv.name
        logger.info("task %s on %s", cfg.task, sys_.label)
        results = _TASKS[cfg.task](cfg, sys_, data, paths, manifest, workers)
        paths.results_json.write_text(
            json.dumps(results, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
        manifest.outputs["results_json"] = paths.results_json.name
        manifest.outputs["report_md"] = paths.report_md.name
        manifest.outputs["report_html"] = paths.report_html.name
        produced = [p for p in paths.task_dir.iterdir() if p != paths.manifest]
        manifest.checksums = checksum_files(
            [p for p in produced if p not in (paths.report_md, paths.report_html)],
            paths.task_dir,
        )
        manifest.finalize_success()
        manifest.write_json(paths.manifest)
        write_report_files(
            manifest_path=paths.manifest,
            results_path=paths.results_json,
            report_md_path=paths.report_md,
            report_html_path=paths.report_html,
        )
        return EXIT_OK
    except (ConfigError, NumericalError, OSError) as exc:
        manifest.finalize_failure(exc)
        manifest.write_json(paths.manifest)
        logger.error("%s failed: %s", cfg.task, exc)
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


def run(
    config_path: Path,
    *,
    task: str | None = None,
    threads: int | None = None,
    root: Path | None = None,
    command: str = "",
) -> int:
    """Load ``config_path`` (optionally forcing ``task``) and execute it."""
    try:
        cfg = RunConfig.from_toml(config_path)
        if task is not None and task != cfg.task:
            cfg = replace(cfg, task=task)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    base = root if root is not None else config_path.resolve().parent
    return execute(cfg, root=base, threads=threads, command=command, config_path=config_path)


def _parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="TOML run configuration.")
    common.add_argument(
        "--threads", type=int, default=None, help="Upper bound on worker threads."
    )
    common.add_argument(
        "--root",
        type=Path,
        default=None,
        help="Directory relative paths resolve against (default: the config's directory).",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    p = argparse.ArgumentParser(
        prog="cut-posterior",
        description="Cut, full and semi-modular posteriors for two-module models.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Run the task named in the config.")
    for name in TASKS:
        sub.add_parser(name, parents=[common], help=f"Run task '{name}'.")
    return p.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    raw = list(sys.argv[1:] if argv is None else argv)
    command = " ".join(["cut-posterior", *[shlex.quote(a) for a in raw]])
    return run(
        args.config,
        task=None if args.command == "run" else args.command,
        threads=args.threads,
        root=args.root,
        command=command,
    )


if __name__ == "__main__":
    raise SystemExit(main())
