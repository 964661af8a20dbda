"""Multi-seed strategy comparisons, accuracy curves, and mobility-map export."""

from __future__ import annotations

import csv
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from qbag.domain import DEFAULT_GRID_CAP, ConfigError, DomainError, grid_points
from qbag.ensemble import Committee, committee_predict
from qbag.loop import LoopConfig, RoundRecord, TestSet, evaluate, run_experiment
from qbag.sampling import Strategy

log = logging.getLogger(__name__)

__all__ = [
    "AccuracyCurve",
    "RunResult",
    "TestSet",
    "aggregate",
    "evaluate",
    "export_map",
    "labels_to_reach",
    "run_comparison",
]


@dataclass
class RunResult:
    strategy: Strategy
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    committee: Committee | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class CurvePoint:
    strategy: str
    seed: int
    round: int
    labels: int
    accuracy: float


@dataclass(frozen=True)
class AggregatePoint:
    strategy: str
    round: int
    labels: int
    median: float
    q25: float
    q75: float
    n_runs: int


@dataclass
class AccuracyCurve:
    raw: list[CurvePoint]
    agg: list[AggregatePoint]
    complete: bool
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    def median(self, strategy: str, labels: int | None = None, round: int | None = None) -> float:
        for a in self.agg:
            if a.strategy == strategy and (labels is None or a.labels == labels) and (round is None or a.round == round):
                return a.median
        raise KeyError((strategy, labels, round))

    def final_median(self, strategy: str) -> float:
        return [a for a in self.agg if a.strategy == strategy][-1].median

    def labels_to_reach(self, strategy: str, threshold: float) -> list[float]:
        """Per-seed labels at which accuracy first reaches ``threshold`` (inf if never)."""
        out = []
        for seed in sorted({p.seed for p in self.raw if p.strategy == strategy}):
            pts = sorted((p for p in self.raw if p.strategy == strategy and p.seed == seed), key=lambda p: p.round)
            out.append(labels_to_reach([p.labels for p in pts], [p.accuracy for p in pts], threshold))
        return out

    def median_labels_to_reach(self, strategy: str, threshold: float) -> float:
        return float(np.median(self.labels_to_reach(strategy, threshold)))


def labels_to_reach(labels: Sequence[int], accuracy: Sequence[float], threshold: float) -> float:
    for n, a in zip(labels, accuracy):
        if a >= threshold:
            return float(n)
    return math.inf


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """(q25, median, q75) with linear interpolation between order statistics."""
    q25, med, q75 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75], method="linear")
    return float(q25), float(med), float(q75)


def aggregate(raw: Iterable[CurvePoint]) -> list[AggregatePoint]:
    groups: dict[tuple[str, int], list[CurvePoint]] = {}
    for p in raw:
        groups.setdefault((p.strategy, p.round), []).append(p)
    out = []
    for (strategy, rnd), pts in groups.items():
        q25, med, q75 = quartiles([p.accuracy for p in pts])
        labels = int(np.median([p.labels for p in pts]))
        out.append(AggregatePoint(strategy, rnd, labels, med, q25, q75, len(pts)))
    return out


def _run_one(config: LoopConfig, checkpoint_dir, oracle_dir) -> RunResult:
    res = RunResult(config.strategy, config.seed)
    try:
        res.committee, res.records = run_experiment(config, checkpoint_dir=checkpoint_dir, oracle_dir=oracle_dir)
    except Exception as exc:  # recorded per run; aggregation continues
        res.error = f"{type(exc).__name__}: {exc}"
        log.debug("run %s/%s failed\n%s", config.strategy.value, config.seed, traceback.format_exc())
    return res


def run_tag(strategy: Strategy | str, seed: int) -> str:
    return f"{Strategy(strategy).value}-s{seed}"


def run_comparison(
    config: LoopConfig,
    strategies: Sequence[Strategy | str],
    seeds: Sequence[int],
    jobs: int = 1,
    checkpoint_root=None,
    oracle_root=None,
    on_result: Callable[[RunResult], None] | None = None,
) -> tuple[AccuracyCurve, list[RunResult]]:
    """One experiment per (strategy, seed); seeds fix the test set and initial pool for every strategy.

    Failed runs are kept in the result list with their error and excluded from
    aggregation; ``AccuracyCurve.complete`` is False when any run failed.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    strategies = [Strategy(s) for s in strategies]
    tasks = []
    for s in strategies:
        for seed in seeds:
            cfg = replace(config, strategy=s, seed=int(seed))
            tag = run_tag(s, seed)
            ck = None if checkpoint_root is None else Path(checkpoint_root) / tag
            od = None if oracle_root is None else Path(oracle_root) / tag
            tasks.append((cfg, ck, od))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_run_one, *t) for t in tasks]
            results = []
            for f in futures:
                results.append(f.result())
                if on_result:
                    on_result(results[-1])
    else:
        results = []
        for t in tasks:
            results.append(_run_one(*t))
            if on_result:
                on_result(results[-1])
    return curves_from_results(results), results


def curves_from_results(results: Sequence[RunResult]) -> AccuracyCurve:
    raw = [
        CurvePoint(r.strategy.value, r.seed, rec.round, rec.labels_total, rec.test_accuracy)
        for r in results
        if r.ok
        for rec in r.records
        if rec.test_accuracy is not None
    ]
    failures = {(r.strategy.value, r.seed): r.error for r in results if not r.ok}
    return AccuracyCurve(raw, aggregate(raw), complete=not failures, failures=failures)


def write_curves(curve: AccuracyCurve, out_dir) -> tuple[Path, Path]:
    """Write ``curves_raw.csv`` and ``curves_agg.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_path, agg_path = out / "curves_raw.csv", out / "curves_agg.csv"
    with open(raw_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "round", "labels", "accuracy"])
        for p in curve.raw:
            w.writerow([p.strategy, p.seed, p.round, p.labels, repr(p.accuracy)])
    with open(agg_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "round", "labels", "median", "q25", "q75"])
        for a in curve.agg:
            w.writerow([a.strategy, a.round, a.labels, repr(a.median), repr(a.q25), repr(a.q75)])
    return raw_path, agg_path


def read_curves_raw(path) -> list[CurvePoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            CurvePoint(r["strategy"], int(r["seed"]), int(r["round"]), int(r["labels"]), float(r["accuracy"]))
            for r in csv.DictReader(fh)
        ]


def map_points(d: int, resolution: int, slice: dict[int, float] | None = None, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
    """Grid over the free axes with sliced axes held fixed; columns in axis order.

    ``slice`` maps zero-based axis index to a fixed normalized value. In 3-D exactly
    one axis must be fixed; in 2-D none may be.
    """
    slice = dict(slice or {})
    if d == 3 and len(slice) != 1:
        raise DomainError("a 3-D map needs exactly one fixed coordinate")
    if d == 2 and slice:
        raise DomainError("a 2-D map cannot be sliced")
    for ax, v in slice.items():
        if not 0 <= ax < d:
            raise DomainError(f"slice axis x{ax + 1} does not exist in d={d}")
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"slice value {v} outside [0, 1]")
    free = [ax for ax in range(d) if ax not in slice]
    sub = grid_points(len(free), resolution, cap)
    pts = np.empty((len(sub), d))
    pts[:, free] = sub
    for ax, v in slice.items():
        pts[:, ax] = v
    return pts


def write_map(points: np.ndarray, labels: np.ndarray, path):
    """Write ``x1..xd,label`` rows to ``path`` (a filename or an open text stream)."""
    if hasattr(path, "write"):
        _write_map_rows(points, labels, path)
        return path
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_map_rows(points, labels, fh)
    return path


def _write_map_rows(points, labels, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([*[f"x{j + 1}" for j in range(points.shape[1])], "label"])
    for p, y in zip(points, labels):
        w.writerow([*(repr(float(v)) for v in p), int(y)])


def export_map(c: Committee, resolution: int, path, slice: dict[int, float] | None = None):
    """Committee majority-vote labels over a dense grid (or a 2-D slice of a 3-D space)."""
    pts = map_points(c.input_dim, resolution, slice)
    return write_map(pts, committee_predict(c, pts), path)


def export_oracle_map(label_fn, d: int, resolution: int, path, slice: dict[int, float] | None = None):
    pts = map_points(d, resolution, slice)
    return write_map(pts, label_fn(pts), path)
