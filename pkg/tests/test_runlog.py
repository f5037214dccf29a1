from __future__ import annotations

import json

from generalized_cut_posterior.config import RunConfig
from generalized_cut_posterior.hashing import checksum_files, sha256_text
from generalized_cut_posterior.report import render_report_md, write_report_files
from generalized_cut_posterior.runlog import RunManifest, config_from_manifest


def _manifest() -> RunManifest:
    cfg = RunConfig()
    return RunManifest(
        cfg=cfg,
        generated_utc="2026-01-01T00:00:00Z",
        command="cut-posterior run --config run.toml",
        schema_hash=cfg.schema_hash(),
    )


def test_failure_keeps_the_last_traceback_line(tmp_path):
    m = _manifest()
    try:
        raise RuntimeError("inner solve exploded")
    except RuntimeError as exc:
        m.finalize_failure(exc)
    m.write_json(tmp_path / "manifest.json")
    data = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert data["status"] == "failed"
    assert data["error_summary"] == "RuntimeError: inner solve exploded"
    assert data["config"]["task"] == "cut"
    assert config_from_manifest(tmp_path / "manifest.json") == m.cfg


def test_success_clears_the_error():
    m = _manifest()
    m.finalize_failure(ValueError("x"))
    m.finalize_success()
    assert m.status == "success"
    assert m.error_summary is None


def test_checksums_are_relative_and_sorted(tmp_path):
    (tmp_path / "b.csv").write_text("b\n", encoding="utf-8")
    (tmp_path / "a.csv").write_text("a\n", encoding="utf-8")
    sums = checksum_files([tmp_path / "b.csv", tmp_path / "a.csv"], tmp_path)
    assert list(sums) == ["a.csv", "b.csv"]
    assert sums["a.csv"] == "sha256:" + sha256_text("a\n")


def test_report_sections(tmp_path):
    m = _manifest()
    m.stages["sampling"] = {"phi_stage": "direct", "failures": 0}
    m.finalize_success()
    results = {
        "summary": [
            {"name": "phi", "mean": 1.0, "sd": 0.1, "ci_low": 0.8, "median": 1.0, "ci_high": 1.2}
        ],
        "calibration": {"method": "plugin", "nu": 1.0, "nu_prime": 0.5, "eta_mask": ["eta"]},
    }
    md = render_report_md(manifest=m.to_public_dict(), results=results)
    assert md.startswith("# Cut-posterior run: cut")
    assert "| `phi` | 1 | 0.1 | 0.8 | 1 | 1.2 |" in md
    assert "- sampling: phi_stage=direct, failures=0" in md
    assert "nu' (module two): **0.5**" in md

    m.write_json(tmp_path / "manifest.json")
    (tmp_path / "results.json").write_text(json.dumps(results), encoding="utf-8")
    write_report_files(
        manifest_path=tmp_path / "manifest.json",
        results_path=tmp_path / "results.json",
        report_md_path=tmp_path / "report.md",
        report_html_path=tmp_path / "report.html",
    )
    assert "<table>" in (tmp_path / "report.html").read_text(encoding="utf-8")
