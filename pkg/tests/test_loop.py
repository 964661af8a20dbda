import numpy as np
import pytest

from qbag.domain import ConfigError, Provenance, build_grid_pool
from qbag.ensemble import dumps_committee
from qbag.loop import (
    LoopConfig,
    TestSet,
    evaluate,
    initialize,
    load_checkpoint,
    make_test_set,
    run_experiment,
    run_round,
)
from qbag.mlp import TrainConfig
from qbag.oracle import OracleSpec, SyntheticOracle, synthetic2d
from qbag.sampling import Strategy
from stub_responder import StubResponder


def small(**kw):
    base = dict(
        rounds=2, batch_size=8, committee_size=4, resolution=21, test_size=40,
        train=TrainConfig(epochs=120), cv_k=3, oracle=OracleSpec("synthetic2d"),
    )
    base.update(kw)
    return LoopConfig(**base)


class TestConfig:
    def test_paper_defaults(self):
        c = LoopConfig.paper_2d()
        assert (c.batch_size, c.explore_count, c.committee_size, c.rounds) == (32, 4, 20, 6)
        assert c.grid_resolution == 101 and c.test_count == 212
        c3 = LoopConfig.paper_3d()
        assert (c3.batch_size, c3.explore_count, c3.rounds, c3.test_count) == (64, 8, 7, 468)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(committee_size=1), dict(n_explore=9, batch_size=8)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LoopConfig(**kw)


class TestInitialize:
    def test_paper_pool(self):
        pool = initialize(build_grid_pool(2, 101), 20, SyntheticOracle(2), seed=0)
        assert pool.n_labeled == 20 and pool.n_unlabeled == 10181
        assert all(i.provenance is Provenance.INITIAL and i.round == 0 for i in pool.labeled_instances())

    def test_zero_is_identity(self):
        pool = build_grid_pool(2, 11)
        assert initialize(pool, 0, SyntheticOracle(2), 0) is pool

    def test_matched_across_calls(self):
        a = initialize(build_grid_pool(2, 31), 20, SyntheticOracle(2), 5)
        b = initialize(build_grid_pool(2, 31), 20, SyntheticOracle(2), 5)
        assert a.labeled_ids.tolist() == b.labeled_ids.tolist()


class TestEvaluate:
    def test_test_set_disjoint_and_true(self):
        pool = build_grid_pool(2, 21)
        test, rest = make_test_set(pool, 50, 3, SyntheticOracle(2))
        assert rest.size == pool.size - 50
        rows = {tuple(p) for p in rest.points}
        assert not any(tuple(x) in rows for x in test.X)
        assert test.y.tolist() == synthetic2d(test.X).tolist()

    def test_constant_committee_scores_prevalence(self):
        from qbag.ensemble import Committee

        z = np.zeros((2, 2, 2))
        W2 = np.zeros((2, 2, 5))
        b2 = np.tile([0, 0, 1.0, 0, 0], (2, 1))
        c = Committee(z, np.zeros((2, 2)), W2, b2, (0, 1), 0)
        pool = build_grid_pool(2, 101)
        test, _ = make_test_set(pool, 212, 0, SyntheticOracle(2))
        assert evaluate(c, test) == np.mean(test.y == 2)
        # majority-class prior by enumeration
        counts = {k: int(np.sum(test.y == k)) for k in range(5)}
        majority = max(counts, key=counts.get)
        b2m = np.zeros((2, 5))
        b2m[:, majority] = 1.0
        cm = Committee(z, np.zeros((2, 2)), W2, b2m, (0, 1), 0)
        assert evaluate(cm, test) == counts[majority] / 212

    def test_empty_test_set(self):
        from qbag.ensemble import Committee

        c = Committee(np.zeros((2, 2, 2)), np.zeros((2, 2)), np.zeros((2, 2, 5)), np.zeros((2, 5)), (0, 1), 0)
        with pytest.raises(ValueError):
            evaluate(c, TestSet(np.zeros((0, 2)), np.zeros(0, dtype=int)))


class TestRound:
    def pool(self, n=20):
        return initialize(build_grid_pool(2, 21), n, SyntheticOracle(2), 1)

    def test_qbag_round_budget_and_provenance(self):
        cfg = small(batch_size=32, n_explore=4, fixed_hidden_units=4)
        pool = self.pool()
        new, _, rec = run_round(pool, cfg, SyntheticOracle(2), 0, 4)
        assert new.n_labeled == pool.n_labeled + 32
        prov = [i.provenance for i in new.labeled_instances()][20:]
        if rec.batch.shortfall == 0 and len(rec.batch.disagreement) == 28:
            assert prov.count(Provenance.DISAGREEMENT) == 28
            assert prov.count(Provenance.EXPLORATORY) == 4
        assert all(i.round == 1 for i in new.labeled_instances()[20:])
        assert rec.labels_total == 20

    def test_random_round(self):
        cfg = small(batch_size=32, strategy=Strategy.RANDOM, fixed_hidden_units=4)
        new, c, rec = run_round(self.pool(), cfg, SyntheticOracle(2), 0, 4)
        prov = [i.provenance for i in new.labeled_instances()][20:]
        assert prov == [Provenance.RANDOM] * 32
        assert c.n_c == 4  # committee still trained

    def test_no_relabeling(self):
        cfg = small(fixed_hidden_units=4)
        pool = self.pool()
        new, _, _ = run_round(pool, cfg, SyntheticOracle(2), 0, 4)
        old = dict(zip(pool.labeled_ids.tolist(), pool.y_labeled.tolist()))
        now = dict(zip(new.labeled_ids.tolist(), new.y_labeled.tolist()))
        assert all(now[i] == y for i, y in old.items())

    def test_entropy_round(self):
        cfg = small(strategy=Strategy.ENTROPY, fixed_hidden_units=4)
        new, _, _ = run_round(self.pool(), cfg, SyntheticOracle(2), 0, 4)
        assert [i.provenance for i in new.labeled_instances()][20:] == [Provenance.ENTROPY] * 8


class TestExperiment:
    def test_records_and_budget(self):
        cfg = small()
        c, recs = run_experiment(cfg)
        assert [r.round for r in recs] == [0, 1, 2]
        assert [r.labels_total for r in recs] == [20, 28, 36]
        assert recs[-1].batch is None
        assert all(0.0 <= r.test_accuracy <= 1.0 for r in recs)

    def test_zero_rounds(self):
        c, recs = run_experiment(small(rounds=0))
        assert len(recs) == 1 and recs[0].labels_total == 20

    def test_deterministic(self):
        _, a = run_experiment(small())
        _, b = run_experiment(small())
        assert all(x.same_outcome(y) for x, y in zip(a, b))

    def test_matched_initial_pools_across_strategies(self):
        seen = {}
        for s in (Strategy.QBAG, Strategy.RANDOM):
            _, recs = run_experiment(small(strategy=s, rounds=0))
            seen[s] = recs[0].test_accuracy, recs[0].hidden_units_chosen
        assert seen[Strategy.QBAG] == seen[Strategy.RANDOM]

    def test_resume_equals_uninterrupted(self, tmp_path):
        cfg = small(rounds=3, oracle=OracleSpec("synthetic2d", noise_rate=0.2))
        c_full, full = run_experiment(cfg)
        interrupted = []

        def stop_after_one(rec):
            interrupted.append(rec)
            if rec.round == 1:
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            run_experiment(cfg, checkpoint_dir=tmp_path, on_round=stop_after_one)
        assert load_checkpoint(tmp_path).next_round == 2
        c_res, resumed = run_experiment(cfg, checkpoint_dir=tmp_path)
        assert len(resumed) == len(full)
        assert all(x.same_outcome(y) for x, y in zip(full, resumed))
        assert dumps_committee(c_full) == dumps_committee(c_res)

    def test_completed_checkpoint_is_idempotent(self, tmp_path):
        cfg = small(rounds=1)
        c1, r1 = run_experiment(cfg, checkpoint_dir=tmp_path)
        c2, r2 = run_experiment(cfg, checkpoint_dir=tmp_path)
        assert len(r2) == len(r1) and dumps_committee(c1) == dumps_committee(c2)

    def test_pool_exhaustion_stops_early(self):
        cfg = small(resolution=6, test_size=4, initial_size=20, batch_size=8, rounds=5)
        _, recs = run_experiment(cfg)
        assert recs[-1].labels_total == 32 and recs[-1].batch is None

    def test_external_matches_in_process(self, tmp_path):
        cfg = small(rounds=1)
        _, direct = run_experiment(cfg)
        ext = small(rounds=1, oracle=OracleSpec("external", external_dir=str(tmp_path), timeout=30))
        with StubResponder(tmp_path, synthetic2d):
            _, remote = run_experiment(ext)
        assert [r.test_accuracy for r in remote] == [r.test_accuracy for r in direct]
        assert (tmp_path / "test" / "queries_0.csv").exists()
        assert (tmp_path / "queries_0.csv").exists() and (tmp_path / "queries_1.csv").exists()
