"""Run manifests, key = value configs and crash-safe output files.

Every output is written to a temporary file in the target directory and
renamed into place, so readers never see a partial line.
"""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np


def versions() -> dict[str, str]:
    import numba
    import scipy

    from . import __version__
    return {"fkwatermelon": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def make_manifest(subcommand: str, params: dict[str, Any], seed: int, **paths) -> dict:
    return {"subcommand": subcommand, "params": to_jsonable(params), "seed": int(seed),
            "versions": versions(), "paths": {k: str(v) for k, v in paths.items() if v is not None}}


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if hasattr(obj, "numerator") and hasattr(obj, "denominator") and not isinstance(obj, int):
        return f"{obj.numerator}/{obj.denominator}"
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True)


def atomic_write(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_jsonl(path, records: Iterable[dict], manifest: dict | None = None) -> Path:
    lines = []
    if manifest is not None:
        lines.append(dumps({"manifest": manifest}))
    lines.extend(dumps(r) for r in records)
    return atomic_write(path, "\n".join(lines) + "\n")


def read_jsonl(path) -> tuple[dict | None, list[dict]]:
    manifest, out = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if manifest is None and not out and set(obj) == {"manifest"}:
                manifest = obj["manifest"]
            else:
                out.append(obj)
    return manifest, out


def write_csv(path, rows: list[dict], columns: list[str] | None = None,
              manifest: dict | None = None) -> Path:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    if manifest is not None:
        buf.write(f"# manifest: {dumps(manifest)}\n")
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: to_jsonable(v) for k, v in row.items()})
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[dict | None, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    manifest = None
    if text.startswith("# manifest: "):
        head, text = text.split("\n", 1)
        manifest = json.loads(head[len("# manifest: "):])
    return manifest, list(csv.DictReader(io.StringIO(text)))


def parse_value(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    return text


def read_config(path) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment; comma lists become lists."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = parse_value(value)
    return out
