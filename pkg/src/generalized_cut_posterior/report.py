from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from markdown_it import MarkdownIt


def _fmt(x: float | None) -> str:
    if x is None:
        return "N/A"
    return f"{x:.4g}"


def _fmt_inline(v: str | None) -> str:
    if not v:
        return "-"
    return f"`{v}`"


def _md_table(headers: list[str], rows: list[list[str]]) -> str:
    head = "| " + " | ".join(headers) + " |"
    sep = "| " + " | ".join(["---"] * len(headers)) + " |"
    body = "\n".join("| " + " | ".join(r) + " |" for r in rows)
    return "\n".join([head, sep, body])


def _summary_section(summary: list[dict[str, Any]]) -> list[str]:
    rows = [
        [
            f"`{r['name']}`",
            _fmt(r.get("mean")),
            _fmt(r.get("sd")),
            _fmt(r.get("ci_low")),
            _fmt(r.get("median")),
            _fmt(r.get("ci_high")),
        ]
        for r in summary
    ]
    return [
        _md_table(["parameter", "mean", "sd", "2.5%", "median", "97.5%"], rows),
        "",
    ]


def _calibration_section(cal: dict[str, Any]) -> list[str]:
    lines = [
        f"- Method: **{cal.get('method', '')}**",
        f"- nu (module one): **{_fmt(cal.get('nu'))}**",
        f"- nu' (module two): **{_fmt(cal.get('nu_prime'))}**",
    ]
    if cal.get("B") is not None:
        lines.append(f"- Bootstrap replicates: **{cal['B']}** (seed {cal.get('seed')})")
    mask = cal.get("eta_mask") or []
    if mask:
        lines.append(f"- Matched coordinates: {', '.join(f'`{n}`' for n in mask)}")
    lines.append("")
    return lines


def _diagnose_section(diag: dict[str, Any]) -> list[str]:
    lines: list[str] = []
    tv = diag.get("total_variance") or {}
    if tv:
        rows = [
            [
                f"`{n}`",
                _fmt(t.get("mean_conditional_variance")),
                _fmt(t.get("variance_of_conditional_mean")),
                _fmt(t.get("empirical_variance")),
            ]
            for n, t in tv.items()
        ]
        lines += [
            "### Variance decomposition",
            "",
            _md_table(["eta", "E[Var(eta|phi)]", "Var(E[eta|phi])", "Var(eta) draws"], rows),
            "",
        ]
    cs = diag.get("credible_sets") or []
    if cs:
        rows = [[str(c["s"]), _fmt(c["logdet"]), _fmt(c["fraction"])] for c in cs]
        lines += [
            f"### Credible sets at selected draws (alpha = {_fmt(diag.get('alpha'))})",
            "",
            _md_table(["draw", "log det Cov", "retained fraction"], rows),
            "",
        ]
    return lines


def render_report_md(*, manifest: dict[str, Any], results: dict[str, Any]) -> str:
    cfg = manifest.get("config") or {}
    task = manifest.get("task", "")
    lines: list[str] = [f"# Cut-posterior run: {task}", ""]

    lines += ["## Run metadata", ""]
    lines.append(f"- Generated (UTC): **{manifest.get('generated_utc', '')}**")
    lines.append(f"- Model: **{manifest.get('model', '')}**")
    lines.append(f"- Seed: **{manifest.get('seed', '')}**, threads **{manifest.get('threads', '')}**")
    lines.append(f"- Config hash: {_fmt_inline(manifest.get('schema_hash'))}")
    model = cfg.get("model") or {}
    lines.append(
        f"- Learning rates: nu **{_fmt(model.get('nu'))}**, nu' **{_fmt(model.get('nu_prime'))}**"
    )
    lines.append("")

    stages = manifest.get("stages") or {}
    if stages:
        lines += ["## Stages", ""]
        for name, info in stages.items():
            if isinstance(info, dict):
                detail = ", ".join(f"{k}={v}" for k, v in info.items())
                lines.append(f"- {name}: {detail}")
            else:
                lines.append(f"- {name}: {info}")
        lines.append("")

    if results.get("summary"):
        lines += ["## Posterior summary", ""]
        lines += _summary_section(results["summary"])
    if results.get("calibration"):
        lines += ["## Learning rates", ""]
        lines += _calibration_section(results["calibration"])
    if results.get("diagnose"):
        lines += ["## Uncertainty propagation", ""]
        lines += _diagnose_section(results["diagnose"])

    outputs = manifest.get("outputs") or {}
    if outputs:
        lines += ["## Outputs", ""]
        for k, v in outputs.items():
            lines.append(f"- {k}: {_fmt_inline(str(v))}")
        lines.append("")

    fence = "`" * 3
    lines += ["## How to reproduce", "", f"{fence}bash", manifest.get("command", ""), fence, ""]
    return "\n".join(lines)


def write_report_files(
    *,
    manifest_path: Path,
    results_path: Path,
    report_md_path: Path,
    report_html_path: Path,
) -> None:
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    results = json.loads(results_path.read_text(encoding="utf-8"))

    for d in {report_md_path.parent, report_html_path.parent}:
        d.mkdir(parents=True, exist_ok=True)

    md = render_report_md(manifest=manifest, results=results)
    if not md.endswith("\n"):
        md += "\n"
    report_md_path.write_text(md, encoding="utf-8", newline="\n")
    report_html_path.write_text(MarkdownIt("commonmark").enable("table").render(md), encoding="utf-8")
