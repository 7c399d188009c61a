"""File formats: result tables, particle files and reference sample files.

All three are CSV. Particle and sample files start with one ``# {json}``
metadata line. Floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..discrepancy import ReferenceSamples, WeightedParticles

__all__ = [
    "RESULT_COLUMNS",
    "ResultTable",
    "FormatError",
    "atomic_write",
    "write_particles",
    "read_particles",
    "write_samples",
    "read_samples",
    "read_results",
]

RESULT_COLUMNS = ("iteration", "n_particles", "mmd2", "ksd", "theorem1_residual", "test_metric", "wallclock_ms")
PARTICLES_FORMAT = "mmdfw-particles"
SAMPLES_FORMAT = "mmdfw-samples"


class FormatError(ValueError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    failure: str | None = None

    def add(self, **values):
        unknown = set(values) - set(RESULT_COLUMNS)
        if unknown:
            raise KeyError(f"unknown result columns {sorted(unknown)}")
        self.rows.append({c: values.get(c) for c in RESULT_COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self):
        lines = [",".join(RESULT_COLUMNS)]
        lines += [",".join(_fmt(r[c]) for c in RESULT_COLUMNS) for r in self.rows]
        if self.failure is not None:
            lines.append("# FAILED " + " ".join(self.failure.split()))
        return "\n".join(lines) + "\n"


def atomic_write(path, text):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _meta_line(meta):
    return "# " + json.dumps(meta, sort_keys=True, separators=(",", ":"))


def _read_meta(lines, path, fmt):
    if not lines or not lines[0].startswith("# "):
        raise FormatError(f"{path}: missing metadata line")
    try:
        meta = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad metadata ({exc})") from None
    if meta.get("format") != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, found {meta.get('format')!r}")
    return meta


def _parse_rows(lines, path, ncol):
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines if ln and not ln.startswith("#")])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != ncol:
        raise FormatError(f"{path}: expected {ncol} columns per row")
    return data


def particles_text(particles, meta):
    P, w = particles.points, particles.weights
    d = P.shape[1]
    meta = {**meta, "format": PARTICLES_FORMAT, "version": 1, "dim": d, "n": P.shape[0]}
    lines = [_meta_line(meta), ",".join(["index", "weight"] + [f"x{j}" for j in range(d)])]
    lines += [",".join([str(i), _fmt(w[i])] + [_fmt(v) for v in P[i]]) for i in range(P.shape[0])]
    return "\n".join(lines) + "\n"


def write_particles(path, particles, meta):
    atomic_write(path, particles_text(particles, meta))


def read_particles(path):
    """Returns (WeightedParticles, metadata dict)."""
    lines = Path(path).read_text().splitlines()
    meta = _read_meta(lines, path, PARTICLES_FORMAT)
    d = int(meta["dim"])
    if len(lines) < 3 or lines[1].split(",")[:2] != ["index", "weight"]:
        raise FormatError(f"{path}: missing column header")
    data = _parse_rows(lines[2:], path, d + 2)
    if not np.array_equal(data[:, 0], np.arange(data.shape[0])):
        raise FormatError(f"{path}: indices must run 0..n-1")
    if data.shape[0] != int(meta["n"]):
        raise FormatError(f"{path}: metadata says {meta['n']} particles, found {data.shape[0]}")
    return WeightedParticles(data[:, 2:], data[:, 1]), meta


def samples_text(samples, meta=None):
    S = samples.samples if isinstance(samples, ReferenceSamples) else np.atleast_2d(samples)
    d = S.shape[1]
    meta = {**(meta or {}), "format": SAMPLES_FORMAT, "version": 1, "dim": d, "n": S.shape[0]}
    lines = [_meta_line(meta), ",".join(f"x{j}" for j in range(d))]
    lines += [",".join(_fmt(v) for v in row) for row in S]
    return "\n".join(lines) + "\n"


def write_samples(path, samples, meta=None):
    atomic_write(path, samples_text(samples, meta))


def read_samples(path):
    """Reads a sample file; a particle file is accepted too (its points are used)."""
    lines = Path(path).read_text().splitlines()
    if lines and lines[0].startswith("# ") and f'"format":"{PARTICLES_FORMAT}"' in lines[0]:
        particles, meta = read_particles(path)
        return ReferenceSamples(particles.points), meta
    meta = _read_meta(lines, path, SAMPLES_FORMAT)
    d = int(meta["dim"])
    if len(lines) < 2 or lines[1] != ",".join(f"x{j}" for j in range(d)):
        raise FormatError(f"{path}: missing column header")
    data = _parse_rows(lines[2:], path, d)
    if data.shape[0] != int(meta["n"]):
        raise FormatError(f"{path}: metadata says {meta['n']} samples, found {data.shape[0]}")
    return ReferenceSamples(data), meta


def read_results(path):
    """Parse a result table back into a ResultTable (floats, ints or None)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ",".join(RESULT_COLUMNS):
        raise FormatError(f"{path}: unexpected header")
    table = ResultTable()
    for ln in lines[1:]:
        if ln.startswith("# FAILED "):
            table.failure = ln[len("# FAILED "):]
            continue
        vals = ln.split(",")
        if len(vals) != len(RESULT_COLUMNS):
            raise FormatError(f"{path}: bad row {ln!r}")
        row = {}
        for c, v in zip(RESULT_COLUMNS, vals):
            row[c] = None if v == "" else (int(v) if c in ("iteration", "n_particles") else float(v))
        table.rows.append(row)
    return table
