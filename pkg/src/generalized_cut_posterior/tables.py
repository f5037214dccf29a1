from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from .hashing import sha256_file


@dataclass(frozen=True, slots=True)
class TableResult:
    path: Path
    sha256: str
    rows: int


def utc_now_iso() -> str:
    # ISO8601 with Z
    return (
        datetime.now(timezone.utc)
        .replace(microsecond=0)
        .isoformat()
        .replace("+00:00", "Z")
    )


def write_table(df: pd.DataFrame, path: Path) -> TableResult:
    """UTF-8 CSV with '.' decimals and repr-precision floats."""
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
    return TableResult(path=path, sha256="sha256:" + sha256_file(path), rows=int(df.shape[0]))


def summary_frame(df: pd.DataFrame) -> pd.DataFrame:
    """Summary tables keep their index as a leading ``name`` column."""
    return df.rename_axis("name").reset_index()
