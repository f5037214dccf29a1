from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1024 * 1024), b""):
            h.update(chunk)
    return h.hexdigest()


def checksum_files(paths: Iterable[Path], root: Path) -> dict[str, str]:
    """``{relative path: "sha256:<hex>"}`` for every existing file, sorted by name."""
    out: dict[str, str] = {}
    for p in paths:
        if not p.is_file():
            continue
        try:
            key = p.relative_to(root).as_posix()
        except ValueError:
            key = p.as_posix()
        out[key] = "sha256:" + sha256_file(p)
    return dict(sorted(out.items()))
