from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig


@dataclass(frozen=True, slots=True)
class RunPaths:
    """
    Every file a run reads or writes, resolved from one root.

    Outputs of a task live under ``<artifacts_dir>/<task>/``.
    """

    root: Path
    artifacts_dir: Path
    task_dir: Path
    manifest: Path
    results_json: Path
    samples_csv: Path
    summary_csv: Path
    report_md: Path
    report_html: Path

    @classmethod
    def from_root(cls, root: Path, cfg: RunConfig) -> "RunPaths":
        root = root.resolve()
        artifacts = Path(cfg.outputs.artifacts_dir)
        if not artifacts.is_absolute():
            artifacts = root / artifacts
        task_dir = artifacts / cfg.task
        return cls(
            root=root,
            artifacts_dir=artifacts,
            task_dir=task_dir,
            manifest=task_dir / "manifest.json",
            results_json=task_dir / "results.json",
            samples_csv=task_dir / "samples.csv",
            summary_csv=task_dir / "summary.csv",
            report_md=task_dir / "report.md",
            report_html=task_dir / "report.html",
        )

    def resolve_input(self, value: str) -> Path:
        """Input paths in the config are relative to the root."""
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def ensure_dirs(self) -> None:
        self.task_dir.mkdir(parents=True, exist_ok=True)
