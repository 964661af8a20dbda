"""Bagged committees of MLPs: bootstrap, train, vote, and locate disagreement."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qbag.domain import DEFAULT_N_CLASSES, DomainError
from qbag.mlp import MlpModel, TrainConfig, fit_stack, forward_logits, load_model_lines, dump_model, softmax

# Rows of the unlabeled pool evaluated per forward pass; bounds peak memory at
# roughly n_c * CHUNK * hidden floats.
CHUNK = 4096


def bootstrap_subsamples(n: int, n_c: int, m_c: int, seed: int) -> np.ndarray:
    """Draw ``n_c`` bootstrap replicates of size ``m_c`` from ``range(n)``.

    Returns an ``(n_c, m_c)`` array of indices, i.i.d. uniform with replacement.
    """
    if n < 1:
        raise ValueError("cannot bootstrap an empty labeled set")
    if n_c < 2:
        raise ValueError("committee needs at least 2 members")
    if m_c < 1:
        raise ValueError("subsample size must be >= 1")
    return np.random.default_rng(seed).integers(0, n, size=(n_c, m_c))


def subsample_weights(subsamples: np.ndarray, n: int) -> np.ndarray:
    """Multiplicity of each labeled instance in each replicate, shape ``(n_c, n)``."""
    return np.stack([np.bincount(s, minlength=n) for s in subsamples]).astype(float)


@dataclass(frozen=True, eq=False)
class Committee:
    """``n_c`` networks of identical shape, stored as stacked parameter arrays."""

    W1: np.ndarray  # (n_c, d, h)
    b1: np.ndarray  # (n_c, h)
    W2: np.ndarray  # (n_c, h, K)
    b2: np.ndarray  # (n_c, K)
    member_seeds: tuple[int, ...]
    subsample_size: int

    def __post_init__(self):
        if self.W1.shape[0] < 2:
            raise DomainError("a committee needs at least 2 members")
        if len(self.member_seeds) != self.W1.shape[0]:
            raise DomainError("one seed per member required")
        for a in (self.W1, self.b1, self.W2, self.b2):
            a.setflags(write=False)

    @classmethod
    def from_members(cls, members: Sequence[MlpModel], subsample_size: int = 0) -> "Committee":
        shapes = {(m.input_dim, m.hidden_units, m.output_dim) for m in members}
        if len(shapes) != 1:
            raise DomainError("committee members must share input, hidden and output sizes")
        return cls(
            np.stack([m.W1 for m in members]),
            np.stack([m.b1 for m in members]),
            np.stack([m.W2 for m in members]),
            np.stack([m.b2 for m in members]),
            tuple(m.rng_seed for m in members),
            subsample_size,
        )

    @property
    def n_c(self) -> int:
        return self.W1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_units(self) -> int:
        return self.W1.shape[2]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[2]

    @property
    def members(self) -> list[MlpModel]:
        return [
            MlpModel(self.W1[t].copy(), self.b1[t].copy(), self.W2[t].copy(), self.b2[t].copy(), self.member_seeds[t])
            for t in range(self.n_c)
        ]

    def params(self):
        return self.W1, self.b1, self.W2, self.b2

    def _points(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise DomainError(f"input has dimension {X.shape[1]}, committee expects {self.input_dim}")
        return X

    def member_proba(self, X) -> np.ndarray:
        """Per-member class probabilities, shape ``(n_c, n, K)``."""
        X = self._points(X)
        out = np.empty((self.n_c, len(X), self.n_classes))
        for s in range(0, len(X), CHUNK):
            out[:, s : s + CHUNK] = softmax(forward_logits(self.params(), X[s : s + CHUNK]))
        return out

    def vote_counts(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Votes per class ``(n, K)`` and summed member probabilities ``(n, K)``.

        Members are reduced in index order so results do not depend on chunking.
        """
        X = self._points(X)
        K = self.n_classes
        counts = np.zeros((len(X), K), dtype=np.int64)
        psum = np.zeros((len(X), K))
        for s in range(0, len(X), CHUNK):
            proba = softmax(forward_logits(self.params(), X[s : s + CHUNK]))
            votes = np.argmax(proba, axis=-1)
            for t in range(self.n_c):
                counts[s + np.arange(votes.shape[1]), votes[t]] += 1
                psum[s : s + CHUNK] += proba[t]
        return counts, psum

    def mean_proba(self, X) -> np.ndarray:
        _, psum = self.vote_counts(X)
        return psum / self.n_c


def train_committee(
    X,
    y,
    hidden_units: int,
    n_c: int,
    m_c: int | None,
    cfg: TrainConfig,
    n_classes: int = DEFAULT_N_CLASSES,
    bootstrap_seed: int | None = None,
    subsamples: np.ndarray | None = None,
    member_seeds: Sequence[int] | None = None,
) -> Committee:
    """Train ``n_c`` networks, member ``t`` on its own bootstrap replicate with seed ``cfg.rng_seed + t``.

    ``m_c=None`` uses ``len(X)``. ``subsamples`` overrides the bootstrap draw
    (rows of indices into ``X``) and ``member_seeds`` the per-member seeds.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    m_c = n if m_c is None else m_c
    if subsamples is None:
        seed = cfg.rng_seed if bootstrap_seed is None else bootstrap_seed
        subsamples = bootstrap_subsamples(n, n_c, m_c, seed)
    subsamples = np.asarray(subsamples)
    if subsamples.shape[0] != n_c:
        raise ValueError("need one subsample per member")
    weights = subsample_weights(subsamples, n)
    seeds = [cfg.rng_seed + t for t in range(n_c)] if member_seeds is None else [int(s) for s in member_seeds]
    if len(seeds) != n_c:
        raise ValueError("need one seed per member")
    params = fit_stack(X, y, n_classes, hidden_units, weights, seeds, cfg)
    return Committee(*params, member_seeds=tuple(seeds), subsample_size=int(subsamples.shape[1]))


def resolve_votes(counts: np.ndarray, psum: np.ndarray) -> np.ndarray:
    """Majority vote; ties by larger summed probability, then smaller class index."""
    counts = np.atleast_2d(counts)
    psum = np.atleast_2d(psum)
    tied = counts == counts.max(axis=1, keepdims=True)
    score = np.where(tied, psum, -np.inf)
    return np.argmax(score, axis=1)


def committee_predict(c: Committee, x):
    """Majority-vote label for one point ``(d,)`` or labels for ``(n, d)``."""
    single = np.ndim(x) == 1
    counts, psum = c.vote_counts(x)
    out = resolve_votes(counts, psum)
    return int(out[0]) if single else out


def disagreement_mask(counts: np.ndarray, n_c: int, max_votes: int | None = None) -> np.ndarray:
    """True where no class has more than half the votes.

    The default test is the exact integer comparison ``2 * max_count <= n_c``.
    ``max_votes`` substitutes a different ceiling on the winning vote count.
    """
    top = np.atleast_2d(counts).max(axis=1)
    if max_votes is None:
        return 2 * top <= n_c
    return top <= max_votes


def in_disagreement_region(c: Committee, x) -> bool:
    counts, _ = c.vote_counts(np.atleast_2d(x))
    return bool(disagreement_mask(counts, c.n_c)[0])


def disagreement_region(c: Committee, X) -> np.ndarray:
    """Indices of rows of ``X`` inside the region of disagreement."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros(0, dtype=np.int64)
    counts, _ = c.vote_counts(X)
    return np.flatnonzero(disagreement_mask(counts, c.n_c))


@dataclass(frozen=True)
class SuspectLabel:
    index: int
    stored_label: int
    voted_label: int
    votes_for_stored: int
    votes_for_voted: int


def flag_suspect_labels(c: Committee, X, y) -> list[SuspectLabel]:
    """Labeled rows whose committee vote disagrees with the stored label."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        return []
    counts, psum = c.vote_counts(X)
    voted = resolve_votes(counts, psum)
    return [
        SuspectLabel(int(i), int(y[i]), int(voted[i]), int(counts[i, y[i]]), int(counts[i, voted[i]]))
        for i in np.flatnonzero(voted != y)
    ]


# ---------------------------------------------------------------------------
# serialization


def dump_committee(c: Committee, fh) -> None:
    """Header ``committee,n_c,m_c``, a line of member seeds, then one model block per member."""
    fh.write(f"committee,{c.n_c},{c.subsample_size}\n")
    fh.write(",".join(str(s) for s in c.member_seeds) + "\n")
    for m in c.members:
        dump_model(m, fh)


def load_committee(fh) -> Committee:
    lines = iter(fh.read().splitlines())
    try:
        tag, n_c, m_c = next(lines).split(",")
        if tag != "committee":
            raise ValueError
        seeds = [int(s) for s in next(lines).split(",")]
    except (StopIteration, ValueError):
        raise DomainError("not a committee file") from None
    members = [load_model_lines(lines, rng_seed=seeds[t]) for t in range(int(n_c))]
    return Committee.from_members(members, int(m_c))


def dumps_committee(c: Committee) -> str:
    buf = io.StringIO()
    dump_committee(c, buf)
    return buf.getvalue()


def loads_committee(text: str) -> Committee:
    return load_committee(io.StringIO(text))
