"""Plain-text storage: TSV matrices and tables, JSON bases and manifests.

Floats are written with ``repr`` so a write -> read -> write cycle is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
from pathlib import Path

import numpy as np

from .covmodel import CovarianceBasis, CovarianceModelError

SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    return str(x)


def write_matrix(path, M, row_ids=None, col_ids=None, corner="id"):
    """Write a 2-D array with a header of column ids and a leading row-id column."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise FormatError("matrix must be 2-D")
    rows = [str(r) for r in (row_ids if row_ids is not None else range(M.shape[0]))]
    cols = [str(c) for c in (col_ids if col_ids is not None else range(M.shape[1]))]
    if len(rows) != M.shape[0] or len(cols) != M.shape[1]:
        raise FormatError("row/column ids do not match the matrix shape")
    lines = ["\t".join([corner] + cols)]
    for rid, row in zip(rows, M):
        lines.append("\t".join([rid] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path):
    """Inverse of :func:`write_matrix`; returns ``(M, row_ids, col_ids)``."""
    text = Path(path).read_text()
    lines = [ln for ln in text.split("\n") if ln != ""]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split("\t")
    cols = header[1:]
    rows, data = [], []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != len(header):
            raise FormatError(f"{path}:{i}: expected {len(header)} fields, got {len(parts)}")
        rows.append(parts[0])
        try:
            data.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from None
    M = np.array(data, dtype=float).reshape(len(rows), len(cols))
    return M, rows, cols


def write_table(path, columns, rows):
    """Write rows (sequences of values) under the given column names."""
    lines = ["\t".join(columns)]
    for r in rows:
        if len(r) != len(columns):
            raise FormatError("row length does not match header")
        lines.append("\t".join(_fmt(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    """Returns ``(columns, rows)`` with every field as a string."""
    lines = [ln for ln in Path(path).read_text().split("\n") if ln != ""]
    if not lines:
        raise FormatError(f"{path}: empty file")
    cols = lines[0].split("\t")
    rows = [ln.split("\t") for ln in lines[1:]]
    for i, r in enumerate(rows, start=2):
        if len(r) != len(cols):
            raise FormatError(f"{path}:{i}: expected {len(cols)} fields")
    return cols, rows


# ---------------------------------------------------------------------------
# basis specifications


def _matrix_from_spec(spec, n):
    kind = spec.get("kind")
    if kind == "identity":
        size = spec.get("size", n)
        return np.eye(size)
    if kind == "dense":
        return np.asarray(spec["values"], dtype=float)
    if kind == "diag":
        return np.diag(np.asarray(spec["values"], dtype=float))
    if kind == "outer":
        v = np.asarray(spec["vector"], dtype=float)
        return np.outer(v, v)
    if kind == "kron":
        left = _matrix_from_spec(spec["left"], None) if isinstance(spec["left"], dict) \
            else np.asarray(spec["left"], dtype=float)
        right = _matrix_from_spec(spec["right"], None) if isinstance(spec["right"], dict) \
            else np.asarray(spec["right"], dtype=float)
        return np.kron(left, right)
    raise FormatError(f"unknown basis matrix kind {kind!r}")


def basis_from_spec(spec: dict) -> CovarianceBasis:
    """Build a basis from ``{"n", "matrices": [...], "constraints"?, "c_bound"?}``.

    Matrix kinds: ``identity``, ``dense`` (values), ``diag`` (values),
    ``outer`` (vector), ``kron`` (left, right as specs or nested lists).
    ``constraints`` is a q x b matrix; the default is theta >= 0.
    """
    allowed = {"schema_version", "n", "matrices", "constraints", "c_bound"}
    unknown = set(spec) - allowed
    if unknown:
        raise FormatError(f"unknown basis keys: {sorted(unknown)}")
    if "matrices" not in spec:
        raise FormatError("basis spec needs 'matrices'")
    n = spec.get("n")
    mats = [_matrix_from_spec(m, n) for m in spec["matrices"]]
    if n is not None and any(m.shape != (n, n) for m in mats):
        raise FormatError(f"basis matrices must be {n} x {n}")
    try:
        return CovarianceBasis(np.stack(mats), spec.get("constraints"),
                               spec.get("c_bound", 1e3))
    except (CovarianceModelError, ValueError) as exc:
        raise FormatError(str(exc)) from None


def basis_to_spec(basis: CovarianceBasis) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n": basis.n,
        "matrices": [{"kind": "dense", "values": B.tolist()} for B in basis.bases],
        "constraints": basis.constraint_matrix.tolist(),
        "c_bound": basis.c_bound,
    }


def read_basis(path) -> CovarianceBasis:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return basis_from_spec(spec)


def write_basis(path, basis: CovarianceBasis):
    write_json(path, basis_to_spec(basis))


# ---------------------------------------------------------------------------
# manifests


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    """``<version>[-g<commit>]+<backend>``; the commit part needs a git checkout."""
    from . import __version__
    from ._backend import BACKEND
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        commit = rev.stdout.strip() if rev.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        commit = ""
    tag = f"-g{commit}" if commit else ""
    return f"{__version__}{tag}+{BACKEND}"


def write_manifest(directory, command: str, config: dict, extra=None):
    directory = Path(directory)
    outputs = sorted(p.name for p in directory.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "version": version_string(),
        "config": config,
        "config_hash": config_hash(config),
        "outputs": {name: file_sha256(directory / name) for name in outputs},
    }
    if extra:
        manifest.update(extra)
    write_json(directory / "manifest.json", manifest)
    return manifest


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
