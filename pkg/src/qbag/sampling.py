"""Batch selection: greedy max-min spacing, the disagreement/exploration composite,
and the random and entropy baselines.

All strategies return pool ids. Ties between equally good candidates are always
broken toward the lexicographically smallest coordinates, which keeps runs
reproducible on symmetric grids.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from qbag.domain import Pool, PoolSizeError
from qbag.ensemble import Committee, disagreement_mask

log = logging.getLogger(__name__)

# Candidate rows per distance block in max_min_sample.
_BLOCK = 8192


class Strategy(str, enum.Enum):
    QBAG = "qbag"
    RANDOM = "random"
    ENTROPY = "entropy"


@dataclass(frozen=True)
class BatchPlan:
    """Ids chosen in one round. ``disagreement`` ids come from D, ``exploratory`` ids from U \\ D."""

    strategy: Strategy
    disagreement: tuple[int, ...] = ()
    exploratory: tuple[int, ...] = ()
    picks: tuple[int, ...] = ()  # random / entropy picks
    shortfall: int = 0

    @property
    def ids(self) -> tuple[int, ...]:
        return self.disagreement + self.exploratory + self.picks

    def __len__(self):
        return len(self.ids)


def lexicographic_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting rows by x1, then x2, ..."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(points.T[::-1])


def _sq_dist_to_set(points, anchors):
    """Squared distance of every row of ``points`` to its nearest anchor (inf if none)."""
    out = np.full(len(points), np.inf)
    if len(anchors) == 0:
        return out
    for s in range(0, len(points), _BLOCK):
        p = points[s : s + _BLOCK]
        for a in anchors:
            np.minimum(out[s : s + _BLOCK], ((p - a) ** 2).sum(axis=1), out=out[s : s + _BLOCK])
    return out


def max_min_sample(n: int, candidates, anchors) -> np.ndarray:
    """Greedily pick ``n`` rows of ``candidates`` far from ``anchors`` and from each other.

    Each step takes the candidate whose nearest neighbour among the anchors and the
    picks so far is farthest away. Returns row indices into ``candidates`` in pick
    order. Asking for more rows than exist returns all of them, still in greedy order.
    """
    cand = np.asarray(candidates, dtype=float)
    if cand.size == 0:
        if n > 0:
            log.warning("max_min_sample: asked for %d points, only 0 candidates", n)
        return np.zeros(0, dtype=np.int64)
    cand = cand.reshape(len(cand), -1)
    anchors = np.asarray(anchors, dtype=float).reshape(len(anchors), -1) if len(anchors) else np.zeros((0, cand.shape[1]))
    if n > len(cand):
        log.warning("max_min_sample: asked for %d points, only %d candidates", n, len(cand))
        n = len(cand)
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    order = lexicographic_order(cand)
    pts = cand[order]
    best = _sq_dist_to_set(pts, anchors)
    taken = np.zeros(len(pts), dtype=bool)
    picks = []
    for _ in range(n):
        score = np.where(taken, -1.0, best)
        i = int(np.argmax(score))  # first maximum = lexicographically smallest
        picks.append(i)
        taken[i] = True
        np.minimum(best, ((pts - pts[i]) ** 2).sum(axis=1), out=best)
    return order[np.array(picks, dtype=np.int64)]


def shannon_entropy(proba) -> np.ndarray:
    """Entropy in bits along the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(proba, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def _check_batch(pool: Pool, n_b: int):
    if n_b < 0:
        raise ValueError("batch size must be >= 0")
    if n_b > pool.n_unlabeled:
        raise PoolSizeError(f"pool exhausted: batch of {n_b} requested, {pool.n_unlabeled} unlabeled left")


def qbag_batch(
    c: Committee,
    pool: Pool,
    n_b: int,
    n_e: int,
    region: np.ndarray | None = None,
    explore_avoids_batch: bool = True,
) -> BatchPlan:
    """Spaced picks inside the region of disagreement plus ``n_e`` spaced picks outside it.

    ``region`` is an optional precomputed boolean mask over ``pool.unlabeled_ids``.
    When D holds fewer than ``n_b - n_e`` points the exploratory share grows to fill
    the batch; when U \\ D is too small the remainder is drawn from D.
    """
    if not 0 <= n_e <= n_b:
        raise ValueError("need 0 <= n_e <= n_b")
    _check_batch(pool, n_b)
    U_ids = pool.unlabeled_ids
    XU = pool.points[U_ids]
    if region is None:
        counts, _ = c.vote_counts(XU)
        region = disagreement_mask(counts, c.n_c)
    D_ids = U_ids[region]
    O_ids = U_ids[~region]
    L = pool.X_labeled

    n_q = min(n_b - n_e, len(D_ids))
    q = D_ids[max_min_sample(n_q, pool.points[D_ids], L)]
    n_x = min(n_b - n_q, len(O_ids))
    anchors = np.vstack([L, pool.points[q]]) if explore_avoids_batch else L
    e = O_ids[max_min_sample(n_x, pool.points[O_ids], anchors)]
    rest = n_b - n_q - n_x
    if rest:
        remaining = np.setdiff1d(D_ids, q)
        extra = remaining[max_min_sample(rest, pool.points[remaining], np.vstack([L, pool.points[q], pool.points[e]]))]
        q = np.concatenate([q, extra])
    return BatchPlan(Strategy.QBAG, tuple(int(i) for i in q), tuple(int(i) for i in e))


def random_batch(pool: Pool, n_b: int, seed: int) -> BatchPlan:
    """``n_b`` unlabeled ids drawn uniformly without replacement."""
    _check_batch(pool, n_b)
    picks = np.random.default_rng(seed).choice(pool.unlabeled_ids, size=n_b, replace=False)
    return BatchPlan(Strategy.RANDOM, picks=tuple(int(i) for i in picks))


def entropy_batch(c: Committee, pool: Pool, n_b: int) -> BatchPlan:
    """The ``n_b`` unlabeled points whose committee-mean prediction has the highest entropy."""
    _check_batch(pool, n_b)
    U_ids = pool.unlabeled_ids
    XU = pool.points[U_ids]
    h = shannon_entropy(c.mean_proba(XU))
    lex = lexicographic_order(XU)
    ranked = lex[np.argsort(-h[lex], kind="stable")]
    return BatchPlan(Strategy.ENTROPY, picks=tuple(int(i) for i in U_ids[ranked[:n_b]]))
