from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

SOURCES = ("cut", "full", "smi", "conditional", "prior")


def _meta_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".meta.json")


def _jsonable(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass(frozen=True, slots=True)
class SampleSet:
    """Labeled S x d matrix of posterior draws plus provenance metadata."""

    draws: np.ndarray
    names: tuple[str, ...]
    source: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        draws = np.array(self.draws, dtype=np.float64)
        if draws.ndim == 1:
            draws = draws[:, None]
        names = tuple(str(n) for n in self.names)
        if draws.ndim != 2 or draws.shape[0] < 1:
            raise ValueError(f"SampleSet: need at least one draw, got shape {draws.shape}")
        if draws.shape[1] != len(names):
            raise ValueError(
                f"SampleSet: {draws.shape[1]} columns but {len(names)} names"
            )
        if not np.all(np.isfinite(draws)):
            bad = int(np.sum(~np.isfinite(draws)))
            raise ValueError(f"SampleSet: {bad} non-finite entries")
        if self.source not in SOURCES:
            raise ValueError(f"SampleSet: unknown source {self.source!r}")
        draws.setflags(write=False)
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def S(self) -> int:
        return int(self.draws.shape[0])

    def column(self, name: str) -> np.ndarray:
        try:
            return self.draws[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"no column {name!r} in {list(self.names)}") from None

    def select(self, names: Sequence[str]) -> "SampleSet":
        idx = [self.names.index(n) for n in names]
        return SampleSet(self.draws[:, idx], tuple(names), self.source, self.meta)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.draws, columns=list(self.names))

    def summary(self, ci: float = 0.95) -> pd.DataFrame:
        lo_q = (1.0 - ci) / 2.0
        df = self.to_frame()
        return pd.DataFrame(
            {
                "mean": df.mean(),
                "sd": df.std(ddof=1) if self.S > 1 else 0.0,
                "ci_low": df.quantile(lo_q),
                "median": df.median(),
                "ci_high": df.quantile(1.0 - lo_q),
            }
        )

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        # repr-precision floats keep reruns byte-identical
        self.to_frame().to_csv(
            path, index=False, encoding="utf-8", float_format="%.17g"
        )
        meta = {"source": self.source, "names": list(self.names), **self.meta}
        _meta_path(path).write_text(
            json.dumps(_jsonable(meta), ensure_ascii=False, indent=2, sort_keys=True)
            + "\n",
            encoding="utf-8",
        )
        return path

    @classmethod
    def from_csv(cls, path: Path, source: str | None = None) -> "SampleSet":
        df = pd.read_csv(path, encoding="utf-8")
        meta: dict[str, Any] = {}
        mp = _meta_path(path)
        if mp.exists():
            meta = json.loads(mp.read_text(encoding="utf-8"))
        src = source or meta.pop("source", "cut")
        meta.pop("names", None)
        return cls(df.to_numpy(dtype=np.float64), tuple(df.columns), src, meta)
