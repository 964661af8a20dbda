"""Core value types: feature vectors, labels, vote tallies and the labeled/unlabeled pool.

Points live in the unit hypercube. Raw simulator inputs (soil density in kg/m^3,
dimensionless friction coefficients, ...) are mapped there with
:func:`normalize_features` so that Euclidean distances are comparable across axes.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_N_CLASSES = 5
DEFAULT_GRID_CAP = 2_000_000

# Pool-level label sentinel for points that have not been sent to the oracle.
UNLABELED = -1


class DomainError(ValueError):
    """Input lies outside the valid domain (bad label, wrong dimension, ...)."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class PoolSizeError(ValueError):
    """A requested grid or batch is larger than allowed or available."""


class Provenance(str, enum.Enum):
    INITIAL = "initial"
    DISAGREEMENT = "disagreement-query"
    EXPLORATORY = "exploratory-query"
    RANDOM = "random-query"
    ENTROPY = "entropy-query"


_PROV_CODES = {p: i for i, p in enumerate(Provenance)}
_PROV_FROM_CODE = {i: p for p, i in _PROV_CODES.items()}

ClassLabel = int


@dataclass(frozen=True)
class FeatureVector:
    """A point in the normalized feature space ``[0, 1]^d``."""

    coords: tuple[float, ...]

    def __post_init__(self):
        coords = tuple(float(c) for c in self.coords)
        if not coords:
            raise DomainError("feature vector must have at least one coordinate")
        for i, c in enumerate(coords):
            if not math.isfinite(c) or c < 0.0 or c > 1.0:
                raise DomainError(f"coordinate x{i + 1}={c!r} is outside [0, 1]")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


@dataclass(frozen=True)
class LabeledInstance:
    features: FeatureVector
    label: ClassLabel
    provenance: Provenance
    round: int

    def __post_init__(self):
        if self.label < 0:
            raise DomainError(f"label {self.label} is negative")
        if self.round < 0:
            raise DomainError(f"round {self.round} is negative")


@dataclass(frozen=True)
class VoteTally:
    """Per-class vote counts of a committee at a single point."""

    counts: tuple[int, ...]

    @property
    def n_c(self) -> int:
        return sum(self.counts)

    @property
    def max_count(self) -> int:
        return max(self.counts)


def check_label(label: int, n_classes: int) -> int:
    if not 0 <= label < n_classes:
        raise DomainError(f"label {label} outside [0, {n_classes - 1}]")
    return int(label)


def tally_votes(predictions: Sequence[int], n_classes: int) -> VoteTally:
    """Count how many committee members predicted each class."""
    if len(predictions) == 0:
        raise DomainError("cannot tally an empty prediction list")
    counts = [0] * n_classes
    for p in predictions:
        counts[check_label(p, n_classes)] += 1
    return VoteTally(tuple(counts))


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2:
        raise ConfigError("bounds must be a sequence of [min, max] pairs")
    if not np.all(np.isfinite(b)):
        raise ConfigError("bounds must be finite")
    for i, (lo, hi) in enumerate(b):
        if not lo < hi:
            raise ConfigError(f"bounds for dimension {i + 1} have min >= max ({lo}, {hi})")
    return b


def normalize_features(raw, bounds) -> np.ndarray:
    """Affinely map raw feature rows onto the unit hypercube.

    Parameters
    ----------
    raw : array-like of shape (n, d)
    bounds : array-like of shape (d, 2)
        Per-dimension ``[min, max]``.

    Returns
    -------
    ndarray of shape (n, d) with entries in ``[0, 1]``.
    """
    b = _check_bounds(bounds)
    x = np.atleast_2d(np.asarray(raw, dtype=float))
    if x.shape[1] != b.shape[0]:
        raise DomainError(f"raw points have dimension {x.shape[1]}, bounds have {b.shape[0]}")
    lo, hi = b[:, 0], b[:, 1]
    for j in range(x.shape[1]):
        col = x[:, j]
        bad = ~np.isfinite(col) | (col < lo[j]) | (col > hi[j])
        if bad.any():
            v = col[np.argmax(bad)]
            raise DomainError(f"value {v!r} in dimension {j + 1} outside bounds [{lo[j]}, {hi[j]}]")
    return (x - lo) / (hi - lo)


def denormalize_features(points, bounds) -> np.ndarray:
    """Inverse of :func:`normalize_features`."""
    b = _check_bounds(bounds)
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[1] != b.shape[0]:
        raise DomainError(f"points have dimension {x.shape[1]}, bounds have {b.shape[0]}")
    return b[:, 0] + x * (b[:, 1] - b[:, 0])


def grid_axis(resolution: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, resolution)


def grid_points(d: int, resolution: int, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
    """Uniform lattice on ``[0, 1]^d`` in lexicographic order."""
    if d < 1:
        raise ConfigError("dimension must be >= 1")
    if resolution < 2:
        raise ConfigError("resolution must be >= 2")
    if resolution**d > cap:
        raise PoolSizeError(f"grid of {resolution}^{d} points exceeds the cap of {cap}")
    axes = [grid_axis(resolution)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def build_grid_pool(d: int, resolution: int, cap: int = DEFAULT_GRID_CAP) -> "Pool":
    return Pool.from_points(grid_points(d, resolution, cap))


class Pool:
    """Labeled set L and unlabeled set U over a fixed finite set of candidate points.

    Every candidate point has an integer id (its row in :attr:`points`). A point is in L
    iff its label is not ``UNLABELED``. Pools are never mutated in place;
    :meth:`with_labels` returns a new pool.
    """

    def __init__(self, points, labels=None, provenance=None, rounds=None, order=None):
        points = np.array(points, dtype=float, ndmin=2)
        n = points.shape[0]
        self.points = points
        self.labels = np.full(n, UNLABELED, dtype=np.int64) if labels is None else np.array(labels, dtype=np.int64)
        self.provenance = np.full(n, -1, dtype=np.int8) if provenance is None else np.array(provenance, dtype=np.int8)
        self.rounds = np.full(n, -1, dtype=np.int64) if rounds is None else np.array(rounds, dtype=np.int64)
        self.order = np.zeros(0, dtype=np.int64) if order is None else np.array(order, dtype=np.int64)
        for a in (self.points, self.labels, self.provenance, self.rounds, self.order):
            a.setflags(write=False)
        if set(self.order.tolist()) != set(np.flatnonzero(self.labels != UNLABELED).tolist()):
            raise DomainError("labeled order does not match labeled points")

    @classmethod
    def from_points(cls, points) -> "Pool":
        pts = np.array(points, dtype=float, ndmin=2)
        if pts.size and (not np.all(np.isfinite(pts)) or pts.min() < 0.0 or pts.max() > 1.0):
            raise DomainError("pool points must be finite and inside [0, 1]^d")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise DomainError("pool contains duplicate points")
        return cls(pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def labeled_ids(self) -> np.ndarray:
        """Ids of labeled points in the order they were labeled."""
        return self.order

    @property
    def unlabeled_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels == UNLABELED)

    @property
    def n_labeled(self) -> int:
        return len(self.order)

    @property
    def n_unlabeled(self) -> int:
        return self.size - self.n_labeled

    @property
    def X_labeled(self) -> np.ndarray:
        return self.points[self.order]

    @property
    def y_labeled(self) -> np.ndarray:
        return self.labels[self.order]

    @property
    def X_unlabeled(self) -> np.ndarray:
        return self.points[self.unlabeled_ids]

    def with_labels(self, ids, labels, provenance, round: int) -> "Pool":
        """Move ``ids`` from U to L with the given labels.

        ``provenance`` is a single :class:`Provenance` or one per id.
        """
        ids = np.asarray(ids, dtype=np.int64).ravel()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if len(ids) != len(labels):
            raise DomainError("ids and labels differ in length")
        if len(np.unique(ids)) != len(ids):
            raise DomainError("duplicate ids in labeling batch")
        if len(ids) and (ids.min() < 0 or ids.max() >= self.size):
            raise DomainError("id outside the pool")
        if np.any(self.labels[ids] != UNLABELED):
            raise DomainError("attempt to relabel an already labeled point")
        if np.any(labels < 0):
            raise DomainError("negative label")
        if isinstance(provenance, Provenance):
            prov = np.full(len(ids), _PROV_CODES[provenance], dtype=np.int8)
        else:
            prov = np.array([_PROV_CODES[Provenance(p)] for p in provenance], dtype=np.int8)
        new_labels = self.labels.copy()
        new_prov = self.provenance.copy()
        new_rounds = self.rounds.copy()
        new_labels[ids] = labels
        new_prov[ids] = prov
        new_rounds[ids] = round
        return Pool(self.points, new_labels, new_prov, new_rounds, np.concatenate([self.order, ids]))

    def drop(self, ids) -> "Pool":
        """Remove unlabeled points entirely (e.g. held-out test points). Ids are renumbered."""
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(self.labels[ids] != UNLABELED):
            raise DomainError("cannot drop labeled points")
        keep = np.ones(self.size, dtype=bool)
        keep[ids] = False
        new_id = np.cumsum(keep) - 1
        return Pool(
            self.points[keep],
            self.labels[keep],
            self.provenance[keep],
            self.rounds[keep],
            new_id[self.order],
        )

    def provenance_of(self, pid: int) -> Provenance | None:
        code = int(self.provenance[pid])
        return None if code < 0 else _PROV_FROM_CODE[code]

    def labeled_instances(self) -> list[LabeledInstance]:
        return [
            LabeledInstance(
                FeatureVector(tuple(self.points[i])),
                int(self.labels[i]),
                _PROV_FROM_CODE[int(self.provenance[i])],
                int(self.rounds[i]),
            )
            for i in self.order
        ]

    def to_csv(self, path) -> None:
        """Write a snapshot: labeled rows first in labeling order, then unlabeled rows by id."""
        d = self.dim
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *[f"x{j + 1}" for j in range(d)], "label", "provenance", "round"])
            for i in self.order:
                w.writerow(
                    [int(i), *(_fmt(v) for v in self.points[i]), int(self.labels[i]),
                     _PROV_FROM_CODE[int(self.provenance[i])].value, int(self.rounds[i])]
                )
            for i in self.unlabeled_ids:
                w.writerow([int(i), *(_fmt(v) for v in self.points[i]), "", "", ""])

    @classmethod
    def from_csv(cls, path) -> "Pool":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DomainError(f"{path}: empty pool snapshot")
        header = rows[0]
        xcols = [h for h in header if h.startswith("x")]
        d = len(xcols)
        if header != ["id", *[f"x{j + 1}" for j in range(d)], "label", "provenance", "round"]:
            raise DomainError(f"{path}: unexpected header {header}")
        body = rows[1:]
        n = len(body)
        ids = np.array([int(r[0]) for r in body], dtype=np.int64)
        if sorted(ids.tolist()) != list(range(n)):
            raise DomainError(f"{path}: ids must be 0..{n - 1}")
        points = np.empty((n, d))
        labels = np.full(n, UNLABELED, dtype=np.int64)
        prov = np.full(n, -1, dtype=np.int8)
        rounds = np.full(n, -1, dtype=np.int64)
        order = []
        for r in body:
            i = int(r[0])
            points[i] = [float(v) for v in r[1 : 1 + d]]
            if r[1 + d] != "":
                labels[i] = int(r[1 + d])
                prov[i] = _PROV_CODES[Provenance(r[2 + d])]
                rounds[i] = int(r[3 + d])
                order.append(i)
        return cls(points, labels, prov, rounds, order)


def _fmt(v: float) -> str:
    return repr(float(v))


def as_points(vectors: Iterable[FeatureVector] | np.ndarray) -> np.ndarray:
    """Stack feature vectors into an ``(n, d)`` array, rejecting mixed dimensions."""
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(vectors).astype(float)
    vs = list(vectors)
    dims = {v.dim for v in vs}
    if len(dims) > 1:
        raise DomainError(f"mixed feature dimensions {sorted(dims)}")
    return np.array([v.coords for v in vs], dtype=float).reshape(len(vs), -1)
