"""The active-learning loop: adapt the network size, bag a committee, pick a batch,
ask the oracle, grow the labeled pool, repeat.

A run with ``N`` query rounds performs ``N + 1`` committee fits: rounds
``0 .. N-1`` each end with a batch query, and round ``N`` only fits and evaluates
the final committee. Round ``k`` trains on ``initial_size + k * batch_size``
labels.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from qbag import rng as rngs
from qbag.domain import DEFAULT_N_CLASSES, ConfigError, DomainError, Pool, PoolSizeError, Provenance, grid_points
from qbag.ensemble import Committee, committee_predict, disagreement_mask, dump_committee, load_committee, train_committee
from qbag.mlp import INITIAL_HIDDEN_UNITS, MIN_HIDDEN_UNITS, CvReport, TrainConfig, adapt_hidden_units, with_seed
from qbag.oracle import NoisyOracle, Oracle, OracleSpec, build_oracle
from qbag.sampling import BatchPlan, Strategy, entropy_batch, qbag_batch, random_batch

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = {2: 101, 3: 41}
DEFAULT_TEST_SIZE = {2: 212, 3: 468}


@dataclass(frozen=True)
class LoopConfig:
    dim: int = 2
    rounds: int = 6
    batch_size: int = 32
    n_explore: int | None = None  # None -> batch_size // 8
    committee_size: int = 20
    subsample_size: int | None = None  # None -> |L| each round
    initial_size: int = 20
    strategy: Strategy = Strategy.QBAG
    oracle: OracleSpec = field(default_factory=OracleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    cv_k: int = 10
    initial_hidden_units: int = INITIAL_HIDDEN_UNITS
    fixed_hidden_units: int | None = None
    explore_avoids_batch: bool = True
    n_classes: int = DEFAULT_N_CLASSES
    resolution: int | None = None  # None -> 101 (2-D) / 41 (3-D)
    test_size: int | None = None  # None -> 212 (2-D) / 468 (3-D)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.explore_count <= self.batch_size:
            raise ConfigError("need 0 <= n_explore <= batch_size")
        if self.committee_size < 2:
            raise ConfigError("committee_size must be >= 2")
        if self.initial_size < 1:
            raise ConfigError("initial_size must be >= 1")
        if self.cv_k < 2:
            raise ConfigError("cv_k must be >= 2")
        if self.initial_hidden_units < MIN_HIDDEN_UNITS:
            raise ConfigError(f"initial_hidden_units must be >= {MIN_HIDDEN_UNITS}")
        if self.fixed_hidden_units is not None and self.fixed_hidden_units < MIN_HIDDEN_UNITS:
            raise ConfigError(f"fixed_hidden_units must be >= {MIN_HIDDEN_UNITS}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    @property
    def explore_count(self) -> int:
        return self.batch_size // 8 if self.n_explore is None else self.n_explore

    @property
    def grid_resolution(self) -> int:
        return self.resolution or DEFAULT_RESOLUTION.get(self.dim, 11)

    @property
    def test_count(self) -> int:
        if self.test_size is not None:
            return self.test_size
        return DEFAULT_TEST_SIZE.get(self.dim, 200)

    @classmethod
    def paper_2d(cls, **kw) -> "LoopConfig":
        base = dict(dim=2, rounds=6, batch_size=32, n_explore=4, committee_size=20, initial_size=20)
        base.update(kw)
        base.setdefault("oracle", OracleSpec("synthetic2d"))
        return cls(**base)

    @classmethod
    def paper_3d(cls, **kw) -> "LoopConfig":
        base = dict(dim=3, rounds=7, batch_size=64, n_explore=8, committee_size=20, initial_size=20)
        base.update(kw)
        base.setdefault("oracle", OracleSpec("synthetic3d"))
        return cls(**base)


@dataclass(frozen=True)
class TestSet:
    __test__ = False  # not a pytest class

    X: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    labels_total: int
    hidden_units_chosen: int
    disagreement_size: int
    batch: BatchPlan | None
    test_accuracy: float | None
    wall_time: float = 0.0
    cv: CvReport | None = None

    def to_json(self) -> dict:
        d = {
            "round": self.round,
            "labels_total": self.labels_total,
            "hidden_units_chosen": self.hidden_units_chosen,
            "disagreement_size": self.disagreement_size,
            "test_accuracy": self.test_accuracy,
            "wall_time": self.wall_time,
            "batch": None,
            "cv": None,
        }
        if self.batch is not None:
            d["batch"] = {
                "strategy": self.batch.strategy.value,
                "disagreement": list(self.batch.disagreement),
                "exploratory": list(self.batch.exploratory),
                "picks": list(self.batch.picks),
                "shortfall": self.batch.shortfall,
            }
        if self.cv is not None:
            d["cv"] = {
                "candidates": list(self.cv.candidate_hidden_units),
                "errors": list(self.cv.mean_error),
                "chosen": self.cv.chosen,
            }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RoundRecord":
        b = d.get("batch")
        batch = None
        if b is not None:
            batch = BatchPlan(Strategy(b["strategy"]), tuple(b["disagreement"]), tuple(b["exploratory"]),
                              tuple(b["picks"]), b["shortfall"])
        c = d.get("cv")
        cv = None if c is None else CvReport(tuple(c["candidates"]), tuple(c["errors"]), c["chosen"])
        return cls(d["round"], d["labels_total"], d["hidden_units_chosen"], d["disagreement_size"], batch,
                   d["test_accuracy"], d["wall_time"], cv)

    def same_outcome(self, other: "RoundRecord") -> bool:
        """Equality ignoring wall-clock time."""
        return replace(self, wall_time=0.0).to_json() == replace(other, wall_time=0.0).to_json()


def evaluate(c: Committee, test: TestSet) -> float:
    """Fraction of test points where the committee's majority vote matches the true label."""
    if test.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(committee_predict(c, test.X) == test.y))


def make_test_set(pool: Pool, size: int, seed: int, oracle: Oracle) -> tuple[TestSet, Pool]:
    """Draw ``size`` held-out points from U, label them, and remove them from the pool."""
    if size == 0:
        return TestSet(np.zeros((0, pool.dim)), np.zeros(0, dtype=np.int64)), pool
    if size > pool.n_unlabeled:
        raise PoolSizeError(f"test set of {size} larger than pool of {pool.n_unlabeled}")
    ids = np.sort(rngs.substream(seed, "test").choice(pool.unlabeled_ids, size=size, replace=False))
    X = pool.points[ids].copy()
    y = np.asarray(oracle.label(X, 0), dtype=np.int64)
    return TestSet(X, y), pool.drop(ids)


def initialize(pool: Pool, initial_size: int, oracle: Oracle, seed: int) -> Pool:
    """Label ``initial_size`` uniformly drawn unlabeled points (provenance ``initial``, round 0)."""
    if initial_size == 0:
        return pool
    if initial_size > pool.n_unlabeled:
        raise PoolSizeError(f"initial set of {initial_size} larger than pool of {pool.n_unlabeled}")
    ids = rngs.substream(seed, "init").choice(pool.unlabeled_ids, size=initial_size, replace=False)
    labels = oracle.label(pool.points[ids], 0)
    return pool.with_labels(ids, labels, Provenance.INITIAL, 0)


def _fit(pool: Pool, config: LoopConfig, round: int, hidden_units: int):
    X, y = pool.X_labeled, pool.y_labeled
    cv = None
    if config.fixed_hidden_units is not None:
        hidden_units = config.fixed_hidden_units
    else:
        k = min(config.cv_k, len(X))
        if k >= 2:
            cv_cfg = with_seed(config.train, rngs.substream_seed(config.seed, "cv", round))
            cv = adapt_hidden_units(X, y, hidden_units, k, cv_cfg, config.n_classes)
            hidden_units = cv.chosen
    train_cfg = with_seed(config.train, rngs.substream_seed(config.seed, "training", round))
    committee = train_committee(
        X, y, hidden_units, config.committee_size, config.subsample_size, train_cfg, config.n_classes,
        bootstrap_seed=rngs.substream_seed(config.seed, "bootstrap", round),
    )
    return committee, hidden_units, cv


def select_batch(committee: Committee, pool: Pool, config: LoopConfig, round: int, region=None) -> BatchPlan:
    n_b = min(config.batch_size, pool.n_unlabeled)
    shortfall = config.batch_size - n_b
    if config.strategy is Strategy.QBAG:
        n_e = min(config.explore_count, n_b)
        plan = qbag_batch(committee, pool, n_b, n_e, region, config.explore_avoids_batch)
    elif config.strategy is Strategy.RANDOM:
        plan = random_batch(pool, n_b, rngs.substream_seed(config.seed, "random_batch", round))
    else:
        plan = entropy_batch(committee, pool, n_b)
    return replace(plan, shortfall=shortfall)


_PICK_PROVENANCE = {Strategy.RANDOM: Provenance.RANDOM, Strategy.ENTROPY: Provenance.ENTROPY}


def apply_batch(pool: Pool, plan: BatchPlan, oracle: Oracle, round: int) -> Pool:
    """Label the batch and move it from U to L with provenance round ``round + 1``."""
    ids = np.array(plan.ids, dtype=np.int64)
    if len(ids) == 0:
        return pool
    labels = oracle.label(pool.points[ids], round + 1)
    prov = (
        [Provenance.DISAGREEMENT] * len(plan.disagreement)
        + [Provenance.EXPLORATORY] * len(plan.exploratory)
        + [_PICK_PROVENANCE.get(plan.strategy, Provenance.RANDOM)] * len(plan.picks)
    )
    return pool.with_labels(ids, labels, prov, round + 1)


def run_round(
    pool: Pool,
    config: LoopConfig,
    oracle: Oracle,
    round: int,
    hidden_units: int,
    test: TestSet | None = None,
    query: bool = True,
) -> tuple[Pool, Committee, RoundRecord]:
    """One pass of: CV adaptation, bagged training, disagreement region, batch, labels, pool update.

    ``hidden_units`` is the size carried over from the previous round. With
    ``query=False`` the round stops after training and evaluation.
    """
    t0 = time.perf_counter()
    labels_total = pool.n_labeled
    committee, hidden, cv = _fit(pool, config, round, hidden_units)
    XU = pool.X_unlabeled
    if len(XU):
        counts, _ = committee.vote_counts(XU)
        region = disagreement_mask(counts, committee.n_c)
    else:
        region = np.zeros(0, dtype=bool)
    acc = evaluate(committee, test) if test is not None and test.size else None
    plan = None
    if query and pool.n_unlabeled:
        plan = select_batch(committee, pool, config, round, region)
        pool = apply_batch(pool, plan, oracle, round)
    record = RoundRecord(round, labels_total, hidden, int(region.sum()), plan, acc, time.perf_counter() - t0, cv)
    return pool, committee, record


# ---------------------------------------------------------------------------
# checkpoints


def _oracle_counter(oracle) -> int:
    return oracle.queries if isinstance(oracle, NoisyOracle) else 0


def save_checkpoint(directory, pool: Pool, committee: Committee | None, next_round: int, hidden_units: int,
                    oracle, records: list[RoundRecord], test: TestSet | None) -> None:
    """Write pool snapshot, committee, counters and records; ``state.json`` is written last."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pool.to_csv(d / "pool.csv")
    if committee is not None:
        with open(d / "committee.txt", "w", encoding="utf-8") as fh:
            dump_committee(committee, fh)
    if test is not None:
        with open(d / "test.csv", "w", encoding="utf-8") as fh:
            fh.write("".join(f"x{j + 1}," for j in range(test.X.shape[1])) + "label\n")
            for x, y in zip(test.X, test.y):
                fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")
    state = {
        "next_round": next_round,
        "hidden_units": hidden_units,
        "oracle_queries": _oracle_counter(oracle),
        "records": [r.to_json() for r in records],
    }
    tmp = d / "state.json.tmp"
    tmp.write_text(json.dumps(state, indent=1))
    os.replace(tmp, d / "state.json")


@dataclass
class Checkpoint:
    pool: Pool
    committee: Committee | None
    next_round: int
    hidden_units: int
    oracle_queries: int
    records: list[RoundRecord]
    test: TestSet | None


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    state = json.loads((d / "state.json").read_text())
    pool = Pool.from_csv(d / "pool.csv")
    committee = None
    if (d / "committee.txt").exists():
        with open(d / "committee.txt", encoding="utf-8") as fh:
            committee = load_committee(fh)
    test = None
    if (d / "test.csv").exists():
        rows = [ln.split(",") for ln in (d / "test.csv").read_text().splitlines()[1:]]
        X = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), -1)
        test = TestSet(X, np.array([int(r[-1]) for r in rows], dtype=np.int64))
    return Checkpoint(pool, committee, state["next_round"], state["hidden_units"], state["oracle_queries"],
                      [RoundRecord.from_json(r) for r in state["records"]], test)


def has_checkpoint(directory) -> bool:
    return directory is not None and (Path(directory) / "state.json").exists()


# ---------------------------------------------------------------------------


def prepare(config: LoopConfig, oracle_dir=None, oracle_start: int = 0):
    """Build the grid pool, the oracles, and the held-out test set for one run."""
    spec = config.oracle
    noise_seed = rngs.substream_seed(config.seed, "noise")
    oracle = build_oracle(spec, config.dim, oracle_dir, noise_seed=noise_seed, start=oracle_start)
    truth = oracle.base if isinstance(oracle, NoisyOracle) else oracle
    pool = Pool.from_points(grid_points(config.dim, config.grid_resolution))
    return pool, oracle, truth


def run_experiment(
    config: LoopConfig,
    checkpoint_dir=None,
    oracle_dir=None,
    oracle: Oracle | None = None,
    on_round=None,
) -> tuple[Committee, list[RoundRecord]]:
    """Run the full loop and return the final committee and one record per round.

    With ``checkpoint_dir`` the state is saved after every round and an existing
    checkpoint there is resumed. ``oracle_dir`` is where an external oracle
    exchanges files (defaults to ``config.oracle.external_dir``); the held-out
    test set is exchanged in its ``test`` subdirectory. Passing ``oracle``
    replaces the configured training oracle (the test set is then labeled by it as well).
    """
    resume = has_checkpoint(checkpoint_dir)
    ck = load_checkpoint(checkpoint_dir) if resume else None
    pool, built, truth = prepare(config, oracle_dir, ck.oracle_queries if ck else 0)
    if oracle is None:
        oracle = built
    else:
        truth = oracle
    if ck is not None:
        pool, committee, start, hidden, records, test = ck.pool, ck.committee, ck.next_round, ck.hidden_units, ck.records, ck.test
    else:
        test_oracle = truth
        if config.oracle.kind == "external" and oracle is built:
            base_dir = Path(oracle_dir or config.oracle.external_dir)
            test_oracle = build_oracle(replace(config.oracle, noise_rate=0.0), config.dim, base_dir / "test")
        test, pool = make_test_set(pool, config.test_count, config.seed, test_oracle)
        pool = initialize(pool, config.initial_size, oracle, config.seed)
        start, hidden, records, committee = 0, config.initial_hidden_units, [], None
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, pool, None, 0, hidden, oracle, records, test)

    for k in range(start, config.rounds + 1):
        query = k < config.rounds and pool.n_unlabeled > 0
        pool, committee, rec = run_round(pool, config, oracle, k, hidden, test, query)
        hidden = rec.hidden_units_chosen
        records.append(rec)
        log.info("round %d: %d labels, %d hidden, |D|=%d, acc=%s", k, rec.labels_total, hidden,
                 rec.disagreement_size, rec.test_accuracy)
        if checkpoint_dir is not None:
            next_round = k + 1 if query else config.rounds + 1
            save_checkpoint(checkpoint_dir, pool, committee, next_round, hidden, oracle, records, test)
        if on_round is not None:
            on_round(rec)
        if not query:
            break
    if committee is None:
        raise DomainError("checkpoint is already complete but holds no committee")
    return committee, records
