"""Atomic file output and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from pathlib import Path
from typing import Iterable, Sequence

OUT_DIR_ENV = "SNNBD_OUT_DIR"


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def fmt_value(v) -> str:
    # repr of a Python float round-trips exactly and is platform-stable
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return fmt_value(v.item())
    if isinstance(v, (list, tuple)):
        return " ".join(fmt_value(x) for x in v)
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[dict | Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        vals = [row[h] for h in header] if isinstance(row, dict) else list(row)
        w.writerow([fmt_value(v) for v in vals])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[dict | Sequence]) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(paths: Iterable[str | Path]) -> str:
    """Hash over (name, size, bytes) of each existing input, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        if not p.is_file():
            continue
        data = p.read_bytes()
        h.update(f"blob {len(data)}\0{p.name}\0".encode())
        h.update(data)
    return h.hexdigest()


class Manifest:
    """Collects artifact paths for one command; written once at the end."""

    def __init__(self, command: str, config_hash: str, out_dir: Path):
        self.command = command
        self.config_hash = config_hash
        self.out_dir = Path(out_dir)
        self.inputs: list[Path] = []
        self.artifacts: dict[str, str] = {}
        self.start = time.time()

    def add_input(self, path: str | Path) -> None:
        self.inputs.append(Path(path))

    def add(self, key: str, path: str | Path) -> None:
        self.artifacts[key] = str(path)

    def write(self, status: int, error: str = "") -> Path:
        doc = {
            "command": self.command,
            "config_hash": self.config_hash,
            "input_hash": content_hash(self.inputs),
            "inputs": [str(p) for p in self.inputs],
            "artifacts": dict(sorted(self.artifacts.items())),
            "wall_clock_s": round(time.time() - self.start, 3),
            "exit_status": status,
            "error": error,
        }
        return atomic_write_text(self.out_dir / f"manifest_{self.command}.json",
                                 json.dumps(doc, indent=2, sort_keys=True) + "\n")
