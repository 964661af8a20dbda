import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qbag.domain import ConfigError, DomainError
from qbag.experiment import (
    CurvePoint,
    aggregate,
    export_map,
    export_oracle_map,
    labels_to_reach,
    map_points,
    quartiles,
    read_curves_raw,
    run_comparison,
    write_curves,
)
from qbag.loop import LoopConfig
from qbag.mlp import TrainConfig
from qbag.oracle import OracleSpec, synthetic2d, synthetic3d


def sorted_quantile(values, q):
    """Linear interpolation between order statistics at position q*(n-1)."""
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


class TestAggregate:
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_quartiles_match_sort_reference(self, vals):
        q25, med, q75 = quartiles(vals)
        for got, q in ((q25, 0.25), (med, 0.5), (q75, 0.75)):
            assert got == pytest.approx(sorted_quantile(vals, q), abs=1e-12)
        assert q25 <= med <= q75

    def test_single_seed_band_collapses(self):
        agg = aggregate([CurvePoint("qbag", 0, 0, 20, 0.8)])
        assert agg[0].q25 == agg[0].median == agg[0].q75 == 0.8

    def test_labels_to_reach(self):
        assert labels_to_reach([20, 52, 84], [0.8, 0.96, 0.9], 0.95) == 52
        assert labels_to_reach([20, 52], [0.8, 0.9], 0.95) == math.inf


class TestMaps:
    def test_2d_rows(self):
        assert len(map_points(2, 101)) == 10201

    def test_3d_slice(self):
        pts = map_points(3, 11, {2: 0.5})
        assert pts.shape == (121, 3) and np.all(pts[:, 2] == 0.5)

    def test_slice_rules(self):
        with pytest.raises(DomainError):
            map_points(2, 11, {0: 0.5})
        with pytest.raises(DomainError):
            map_points(3, 11)
        with pytest.raises(DomainError):
            map_points(3, 11, {2: 1.5})

    def test_oracle_map(self, tmp_path):
        path = export_oracle_map(synthetic2d, 2, 101, tmp_path / "truth.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "x1,x2,label" and len(lines) == 10202

    def test_oracle_3d_slice_equals_2d(self, tmp_path):
        a = export_oracle_map(synthetic3d, 3, 11, tmp_path / "a.csv", {2: 0.5}).read_text().splitlines()
        b = export_oracle_map(synthetic2d, 2, 11, tmp_path / "b.csv").read_text().splitlines()
        assert [r.rsplit(",", 1)[1] for r in a] == [r.rsplit(",", 1)[1] for r in b]


def tiny():
    return LoopConfig(rounds=1, batch_size=8, committee_size=3, resolution=21, test_size=30,
                      train=TrainConfig(epochs=80), cv_k=3, oracle=OracleSpec("synthetic2d"))


class TestComparison:
    def test_curves_and_files(self, tmp_path):
        curve, results = run_comparison(tiny(), ["qbag", "random"], [0, 1])
        assert curve.complete and len(results) == 4
        assert len(curve.raw) == 8 and len(curve.agg) == 4
        raw, _ = write_curves(curve, tmp_path)
        assert read_curves_raw(raw) == curve.raw
        export_map(results[0].committee, 11, tmp_path / "map.csv")
        assert len((tmp_path / "map.csv").read_text().splitlines()) == 122

    def test_round_zero_matched(self):
        curve, _ = run_comparison(tiny(), ["qbag", "random"], [3])
        assert curve.median("qbag", round=0) == curve.median("random", round=0)

    def test_failed_run_recorded(self):
        cfg = LoopConfig(rounds=0, committee_size=2, resolution=5, test_size=20, initial_size=10,
                         train=TrainConfig(epochs=10), oracle=OracleSpec("synthetic2d"))
        curve, results = run_comparison(cfg, ["random"], [0])
        assert not curve.complete and results[0].error.startswith("PoolSizeError")

    def test_needs_seed(self):
        with pytest.raises(ConfigError):
            run_comparison(tiny(), ["qbag"], [])

    def test_parallel_equals_serial(self):
        a, _ = run_comparison(tiny(), ["qbag"], [0, 1], jobs=1)
        b, _ = run_comparison(tiny(), ["qbag"], [0, 1], jobs=2)
        assert a.raw == b.raw
