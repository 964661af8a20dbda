import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbag.domain import DomainError
from qbag.mlp import (
    MlpModel,
    TrainConfig,
    TrainingDivergenceError,
    accuracy,
    adapt_hidden_units,
    argmax_first,
    choose_candidate,
    dumps_model,
    fit_stack,
    fold_indices,
    hidden_unit_candidates,
    init_params,
    kfold_cv_error,
    loads_model,
    loss_and_grads,
    predict,
    predict_proba,
    train,
)

FAST = TrainConfig(epochs=400, step_size=0.5)


def reference_loss(W1, b1, W2, b2, X, y, w, l2):
    """Per-sample loop over the same objective, written independently of the vectorized code."""
    total = 0.0
    for x, label, wi in zip(X, y, w):
        h = [max(0.0, sum((2 * x[i] - 1) * W1[i, j] for i in range(len(x))) + b1[j]) for j in range(len(b1))]
        logits = [sum(h[j] * W2[j, k] for j in range(len(h))) + b2[k] for k in range(len(b2))]
        m = max(logits)
        lse = m + np.log(sum(np.exp(v - m) for v in logits))
        total += wi * (lse - logits[label])
    total /= sum(w)
    return total + 0.5 * l2 * (np.sum(W1**2) + np.sum(W2**2))


def separable_2class(n=20, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    y = (X[:, 0] + X[:, 1] > 1.0).astype(int)
    return X, y


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        d, h, K, n, l2 = 2, 3, 3, 7, 1e-3
        while True:
            W1, b1, W2, b2 = init_params(d, h, K, seed)
            b1 = rng.normal(size=h) * 0.3
            b2 = rng.normal(size=K) * 0.3
            X = rng.random((n, d))
            if np.abs((2 * X - 1) @ W1 + b1).min() > 1e-3:  # stay away from ReLU kinks
                break
        y = rng.integers(0, K, n)
        w = rng.random(n) + 0.5
        params = [W1, b1, W2, b2]
        _, grads = loss_and_grads(tuple(p[None] for p in params), X, np.eye(K)[y], w[None], l2)
        eps = 1e-6
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = reference_loss(*params, X, y, w, l2)
                p[idx] = old - eps
                down = reference_loss(*params, X, y, w, l2)
                p[idx] = old
                num[idx] = (up - down) / (2 * eps)
            rel = np.linalg.norm(g[0] - num) / max(np.linalg.norm(g[0]), np.linalg.norm(num), 1e-12)
            assert rel <= 1e-4

    def test_loss_matches_reference(self):
        rng = np.random.default_rng(3)
        W1, b1, W2, b2 = init_params(2, 4, 3, 1)
        X, y, w = rng.random((5, 2)), rng.integers(0, 3, 5), rng.random(5) + 0.1
        loss, _ = loss_and_grads((W1[None], b1[None], W2[None], b2[None]), X, np.eye(3)[y], w[None], 0.01)
        assert loss[0] == pytest.approx(reference_loss(W1, b1, W2, b2, X, y, w, 0.01), rel=1e-12)


class TestTrain:
    def test_separable_fit(self):
        X, y = separable_2class()
        m = train(X, y, 4, TrainConfig(epochs=1000), n_classes=2)
        assert accuracy(m, X, y) == 1.0

    def test_singleton_memorized(self):
        x0 = np.array([[0.3, 0.8]])
        m = train(x0, [3], 2, FAST, n_classes=5)
        p = predict_proba(m, x0[0])
        assert p[3] > 1 / 5
        assert int(np.argmax(p)) == 3
        assert predict(m, x0[0]) == 3

    def test_bitwise_determinism(self):
        X, y = separable_2class(30, seed=4)
        a = train(X, y, 6, FAST, n_classes=2)
        b = train(X, y, 6, FAST, n_classes=2)
        for pa, pb in zip(a.params(), b.params()):
            assert np.array_equal(pa, pb)

    def test_stack_slices_equal_single_training(self):
        X, y = separable_2class(25, seed=1)
        params = fit_stack(X, y, 2, 5, np.ones((3, 25)), [7, 8, 9], FAST)
        single = train(X, y, 5, TrainConfig(epochs=400, step_size=0.5, rng_seed=8), n_classes=2)
        for stacked, p in zip(params, single.params()):
            assert np.array_equal(stacked[1], p)

    def test_training_improves_on_initial(self):
        rng = np.random.default_rng(5)
        X = rng.random((60, 2))
        y = (3 * X[:, 0]).astype(int) % 3
        init = MlpModel(*init_params(2, 8, 3, 11))
        trained = train(X, y, 8, TrainConfig(epochs=300, rng_seed=11), n_classes=3)
        assert accuracy(trained, X, y) >= accuracy(init, X, y)

    def test_minibatch_path(self):
        X, y = separable_2class(40)
        m = train(X, y, 4, TrainConfig(epochs=300, minibatch_size=16, step_size=0.2), n_classes=2)
        assert accuracy(m, X, y) >= 0.95
        m2 = train(X, y, 4, TrainConfig(epochs=300, minibatch_size=16, step_size=0.2), n_classes=2)
        assert np.array_equal(m.W1, m2.W1)

    def test_divergence_raises_after_retry(self):
        X, y = separable_2class()
        with pytest.raises(TrainingDivergenceError):
            train(X, y, 4, TrainConfig(epochs=200, step_size=1e3, l2_penalty=10.0, momentum=0.0), n_classes=2)

    def test_bad_labels(self):
        with pytest.raises(DomainError):
            train([[0.1, 0.1]], [5], 2, FAST, n_classes=5)

    def test_hidden_floor(self):
        with pytest.raises(DomainError):
            train([[0.1, 0.1]], [0], 1, FAST)


class TestPredict:
    def test_zero_output_layer_is_uniform(self):
        W1, b1, _, _ = init_params(2, 3, 5, 0)
        m = MlpModel(W1, b1, np.zeros((3, 5)), np.zeros(5))
        np.testing.assert_allclose(predict_proba(m, [0.2, 0.9]), np.full(5, 0.2), atol=1e-15)
        assert predict(m, [0.2, 0.9]) == 0

    def test_argmax_rules(self):
        assert argmax_first(np.array([0.1, 0.7, 0.2, 0, 0])) == 1
        assert argmax_first(np.array([0.5, 0.5])) == 0
        assert argmax_first(np.full(5, 0.2)) == 0

    def test_dimension_mismatch(self):
        m = MlpModel(*init_params(2, 3, 5, 0))
        with pytest.raises(DomainError):
            predict_proba(m, [0.1, 0.2, 0.3])

    def test_softmax_properties_random_models(self):
        rng = np.random.default_rng(0)
        for i in range(1000):
            d, h, K = rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 6)
            W1, b1, W2, b2 = init_params(d, h, K, i)
            m = MlpModel(W1 * rng.uniform(0.1, 50), b1 + rng.normal(size=h), W2 * rng.uniform(0.1, 50), b2)
            p = predict_proba(m, rng.random(d))
            assert np.all(p >= 0) and np.all(p <= 1)
            assert abs(p.sum() - 1.0) <= 1e-9

    def test_serialization_round_trip(self):
        X, y = separable_2class()
        m = train(X, y, 3, FAST, n_classes=2)
        text = dumps_model(m)
        assert text.splitlines()[0] == "2,3,2"
        back = loads_model(text)
        for a, b in zip(m.params(), back.params()):
            assert np.array_equal(a, b)

    def test_corrupt_model(self):
        with pytest.raises(DomainError):
            loads_model("2,3,2\n0.1,0.2\n")


class TestCrossValidation:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 50).flatmap(lambda n: st.tuples(st.just(n), st.integers(2, n), st.integers(0, 2**31))))
    def test_folds_partition(self, nks):
        n, k, seed = nks
        folds = fold_indices(n, k, seed)
        allidx = np.concatenate(folds)
        assert len(folds) == k
        assert sorted(allidx.tolist()) == list(range(n))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_fittable_data_low_error(self):
        X, y = separable_2class(60, seed=2)
        err = kfold_cv_error(X, y, 8, 10, TrainConfig(epochs=600), n_classes=2)
        assert err <= 0.05

    def test_random_labels_near_half(self):
        errs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            X = rng.random((200, 2))
            y = rng.integers(0, 2, 200)
            errs.append(kfold_cv_error(X, y, 4, 10, TrainConfig(epochs=200, rng_seed=seed), n_classes=2))
        assert abs(np.mean(errs) - 0.5) <= 0.1

    def test_leave_one_out(self):
        X, y = separable_2class(8)
        folds = fold_indices(8, 8, 0)
        assert all(len(f) == 1 for f in folds)
        err = kfold_cv_error(X, y, 2, 8, FAST, n_classes=2)
        assert 0.0 <= err <= 1.0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            kfold_cv_error(np.zeros((3, 2)), [0, 1, 0], 2, 4, FAST)

    def test_deterministic(self):
        X, y = separable_2class(40, seed=9)
        a = kfold_cv_error(X, y, 4, 5, FAST, n_classes=2)
        b = kfold_cv_error(X, y, 4, 5, FAST, n_classes=2)
        assert a == b


class TestAdaptation:
    def test_candidates_at_floor(self):
        assert hidden_unit_candidates(2) == (2, 4)

    def test_candidates_from_start(self):
        assert hidden_unit_candidates(4) == (2, 4, 8)

    def test_odd_count_halves_down(self):
        assert hidden_unit_candidates(5) == (2, 5, 10)

    def test_tie_prefers_fewer_units(self):
        assert choose_candidate((2, 4, 8), (0.10, 0.10, 0.12)) == 2

    def test_report(self):
        X, y = separable_2class(30)
        rep = adapt_hidden_units(X, y, 4, 5, FAST, n_classes=2)
        assert rep.candidate_hidden_units == (2, 4, 8)
        assert rep.chosen == choose_candidate(rep.candidate_hidden_units, rep.mean_error)
        assert all(0 <= e <= 1 for e in rep.mean_error)
