"""Label providers.

Synthetic targets stand in for the vehicle-terrain simulator; :class:`NoisyOracle`
corrupts a fraction of answers; :class:`ExternalOracle` hands batches to an
out-of-process labeler through CSV files in a shared directory.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from qbag.domain import DEFAULT_N_CLASSES, DomainError, denormalize_features


class ProtocolError(ValueError):
    """The external labeler produced a malformed response."""


class PendingOracleError(RuntimeError):
    """The external labeler did not answer before the timeout."""

    def __init__(self, message: str, round: int, received: dict[int, int], missing: list[int], manifest: Path):
        super().__init__(message)
        self.round = round
        self.received = received
        self.missing = missing
        self.manifest = manifest


class Oracle(Protocol):
    dim: int
    n_classes: int

    def label(self, X: np.ndarray, round: int) -> np.ndarray: ...


def _check_unit(X, dim):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != dim:
        raise DomainError(f"expected {dim}-dimensional points, got {X.shape[1]}")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        raise DomainError("synthetic oracle queried outside [0, 1]^d")
    return X


def speed_score_2d(X) -> np.ndarray:
    """Continuous stand-in for speed-made-good on the unit square (0 = slowest)."""
    x1, x2 = X[:, 0], X[:, 1]
    return 0.55 * x2 + 0.45 * (1.0 - x1) + 0.12 * np.sin(2 * np.pi * x1) * np.cos(np.pi * x2)


def _classify(score, n_classes=DEFAULT_N_CLASSES):
    return np.floor(n_classes * np.clip(score, 0.0, 0.9999)).astype(np.int64)


def synthetic2d(x):
    """Five speed classes on ``[0, 1]^2``; accepts one point or an ``(n, 2)`` array."""
    single = np.ndim(x) == 1
    X = _check_unit(x, 2)
    out = _classify(speed_score_2d(X))
    return int(out[0]) if single else out


def synthetic3d(x):
    """The 2-D target with its second axis shifted by ``0.2 * (x3 - 0.5)``."""
    single = np.ndim(x) == 1
    X = _check_unit(x, 3)
    shifted = np.clip(X[:, 1] + 0.2 * (X[:, 2] - 0.5), 0.0, 1.0)
    out = _classify(speed_score_2d(np.column_stack([X[:, 0], shifted])))
    return int(out[0]) if single else out


class SyntheticOracle:
    def __init__(self, dim: int):
        if dim not in (2, 3):
            raise DomainError("synthetic oracles exist for d=2 and d=3 only")
        self.dim = dim
        self.n_classes = DEFAULT_N_CLASSES
        self._fn = synthetic2d if dim == 2 else synthetic3d

    def label(self, X, round: int = 0) -> np.ndarray:
        return self._fn(np.atleast_2d(X))


class NoisyOracle:
    """Flip each answer of ``base`` with probability ``p`` to a uniformly random other class.

    Flip decisions depend only on ``(seed, query number)``, where queries are
    numbered from ``start`` in the order they are asked. The counter lives in
    :attr:`queries` so checkpoints can restore it.
    """

    def __init__(self, base: Oracle, p: float, seed: int, start: int = 0):
        if not 0.0 <= p < 1.0:
            raise ValueError("noise rate must be in [0, 1)")
        self.base = base
        self.p = p
        self.seed = seed
        self.queries = start
        self.dim = base.dim
        self.n_classes = base.n_classes

    def label(self, X, round: int = 0) -> np.ndarray:
        y = np.array(self.base.label(X, round), dtype=np.int64)
        K = self.n_classes
        for i in range(len(y)):
            if self.p > 0:
                rng = np.random.default_rng([self.seed, self.queries])
                if rng.random() < self.p:
                    r = int(rng.integers(K - 1))
                    y[i] = r if r < y[i] else r + 1
            self.queries += 1
        return y


def noisy_wrap(base: Oracle, p: float, seed: int) -> NoisyOracle:
    return NoisyOracle(base, p, seed)


def _write_atomic(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    os.replace(tmp, path)


def queries_path(directory, round: int) -> Path:
    return Path(directory) / f"queries_{round}.csv"


def labels_path(directory, round: int) -> Path:
    return Path(directory) / f"labels_{round}.csv"


def write_queries(directory, round: int, raw_points) -> Path:
    raw = np.atleast_2d(raw_points)
    d = raw.shape[1]
    rows = [["id", *[f"x{j + 1}" for j in range(d)]]]
    rows += [[i, *(repr(float(v)) for v in p)] for i, p in enumerate(raw)]
    path = queries_path(directory, round)
    _write_atomic(path, rows)
    return path


def read_labels(path: Path, n: int, n_classes: int) -> dict[int, int]:
    """Parse a labels file; raise :class:`ProtocolError` on anything malformed.

    An empty file or a header-only file parses to an empty mapping.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return {}
    if rows[0] != ["id", "label"]:
        raise ProtocolError(f"{path.name}: header must be 'id,label', got {','.join(rows[0])!r}")
    got: dict[int, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ProtocolError(f"{path.name} line {lineno}: expected 2 fields, got {len(row)}")
        try:
            pid, lab = int(row[0]), int(row[1])
        except ValueError:
            raise ProtocolError(f"{path.name} line {lineno}: non-integer field in {row}") from None
        if not 0 <= pid < n:
            raise ProtocolError(f"{path.name} line {lineno}: unknown id {pid}")
        if pid in got:
            raise ProtocolError(f"{path.name} line {lineno}: duplicate id {pid}")
        if not 0 <= lab < n_classes:
            raise ProtocolError(f"{path.name} line {lineno}: label {lab} outside [0, {n_classes - 1}]")
        got[pid] = lab
    return got


def external_query(
    batch,
    directory,
    round: int,
    timeout: float,
    bounds=None,
    n_classes: int = DEFAULT_N_CLASSES,
    poll_interval: float = 0.05,
) -> np.ndarray:
    """Write ``queries_<round>.csv`` and wait for ``labels_<round>.csv``.

    Coordinates are written denormalized through ``bounds`` (identity when None).
    Labels are returned in batch order. An incomplete labels file is treated as
    still pending; on timeout a ``pending_<round>.json`` manifest lists what
    arrived and what is missing.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    if X.size == 0:
        raise ValueError("external query needs a non-empty batch")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = X if bounds is None else denormalize_features(X, bounds)
    qpath = queries_path(directory, round)
    if not (qpath.exists() and _same_queries(qpath, raw)):
        write_queries(directory, round, raw)
    lpath = labels_path(directory, round)
    n = len(X)
    deadline = time.monotonic() + timeout
    got: dict[int, int] = {}
    while True:
        if lpath.exists():
            got = read_labels(lpath, n, n_classes)
            if len(got) == n:
                return np.array([got[i] for i in range(n)], dtype=np.int64)
        if time.monotonic() >= deadline:
            break
        time.sleep(poll_interval)
    missing = [i for i in range(n) if i not in got]
    manifest = directory / f"pending_{round}.json"
    manifest.write_text(json.dumps({"round": round, "received": got, "missing": missing}, indent=1))
    raise PendingOracleError(
        f"no complete labels for round {round} in {directory} after {timeout}s ({len(missing)} missing)",
        round, got, missing, manifest,
    )


def _same_queries(path: Path, raw: np.ndarray) -> bool:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    if len(rows) != len(raw):
        return False
    return all(float(v) == p for r, q in zip(rows, raw) for v, p in zip(r[1:], q))


class ExternalOracle:
    """Delegates labeling to whatever answers the file protocol in ``directory``."""

    def __init__(self, directory, dim: int, timeout: float, bounds=None, n_classes: int = DEFAULT_N_CLASSES,
                 poll_interval: float = 0.05):
        self.directory = Path(directory)
        self.dim = dim
        self.timeout = timeout
        self.bounds = bounds
        self.n_classes = n_classes
        self.poll_interval = poll_interval

    def label(self, X, round: int = 0) -> np.ndarray:
        return external_query(X, self.directory, round, self.timeout, self.bounds, self.n_classes, self.poll_interval)


@dataclass(frozen=True)
class OracleSpec:
    kind: str = "synthetic2d"  # synthetic2d | synthetic3d | external
    noise_rate: float = 0.0
    noise_seed: int = 0
    external_dir: str | None = None
    timeout: float = 3600.0
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic2d", "synthetic3d", "external"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.kind == "external" and not self.external_dir:
            raise ValueError("external oracle needs external_dir")


def build_oracle(spec: OracleSpec, dim: int, directory=None, noise_seed: int | None = None, start: int = 0) -> Oracle:
    """Instantiate the oracle described by ``spec``; noise wraps the base when ``noise_rate > 0``."""
    if spec.kind == "external":
        base: Oracle = ExternalOracle(directory or spec.external_dir, dim, spec.timeout, spec.bounds)
    else:
        want = 2 if spec.kind == "synthetic2d" else 3
        if dim != want:
            raise DomainError(f"{spec.kind} needs d={want}, got d={dim}")
        base = SyntheticOracle(want)
    if spec.noise_rate > 0:
        return NoisyOracle(base, spec.noise_rate, spec.noise_seed if noise_seed is None else noise_seed, start)
    return base
