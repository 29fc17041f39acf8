import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgn.probes import (
    UndefinedScoreError, fit_probe, r2_score, ridge_fit, ridge_predict, svm_fit, svm_predict,
)


class TestRidge:
    def test_normal_equations_oracle(self, rng):
        X, y, alpha = rng.normal(size=(5, 3)), rng.normal(size=5), 0.7
        Xt = np.hstack([np.ones((5, 1)), X])
        P = alpha * np.eye(4)
        P[0, 0] = 0
        expect = np.linalg.inv(Xt.T @ Xt + P) @ Xt.T @ y
        np.testing.assert_allclose(ridge_fit(X, y, alpha), expect, atol=1e-8)

    def test_exact_fit_limit(self):
        x = np.linspace(-1, 1, 20)[:, None]
        coef = ridge_fit(x, 2 * x[:, 0], 1e-10)
        assert coef[1] == pytest.approx(2.0, abs=1e-6)
        assert coef[0] == pytest.approx(0.0, abs=1e-8)

    def test_heavy_penalty_limit(self, rng):
        X, y = rng.normal(size=(30, 4)), rng.normal(size=30) + 3
        coef = ridge_fit(X, y, 1e12)
        assert np.max(np.abs(coef[1:])) < 1e-8
        assert coef[0] == pytest.approx(y.mean(), rel=1e-6)

    def test_residuals_orthogonal_at_small_alpha(self, rng):
        X, y = rng.normal(size=(40, 3)), rng.normal(size=40)
        coef = ridge_fit(X, y, 1e-10)
        res = y - ridge_predict(coef, X)
        Xt = np.hstack([np.ones((40, 1)), X])
        np.testing.assert_allclose(Xt.T @ res, 0, atol=1e-7)

    def test_multiple_targets(self, rng):
        X, Y = rng.normal(size=(12, 3)), rng.normal(size=(12, 2))
        both = ridge_fit(X, Y, 0.5)
        for k in range(2):
            np.testing.assert_allclose(both[:, k], ridge_fit(X, Y[:, k], 0.5), atol=1e-12)

    def test_bad_alpha(self, rng):
        with pytest.raises(ValueError):
            ridge_fit(rng.normal(size=(3, 2)), np.zeros(3), 0.0)

    def test_row_mismatch(self, rng):
        with pytest.raises(ValueError):
            ridge_fit(rng.normal(size=(3, 2)), np.zeros(4), 1.0)

    def test_probe_picks_validation_best(self, rng):
        X = rng.normal(size=(60, 5))
        y = X @ np.array([1.0, -2.0, 0.0, 0.5, 0.0]) + 0.1 * rng.normal(size=60)
        probe = fit_probe(X[:40], y[:40], X[40:], y[40:], alphas=(1e-3, 1e3))
        assert probe.alpha == 1e-3 and probe.val_r2 > 0.95


class TestR2:
    def test_perfect(self, rng):
        y = rng.normal(size=10)
        assert r2_score(y, y) == 1.0

    def test_mean_prediction(self, rng):
        y = rng.normal(size=10)
        assert r2_score(y, np.full(10, y.mean())) == pytest.approx(0.0, abs=1e-12)

    def test_loop_oracle(self, rng):
        y, p = rng.normal(size=8), rng.normal(size=8)
        mean = sum(y) / len(y)
        ss_res = sum((a - b) ** 2 for a, b in zip(y, p))
        ss_tot = sum((a - mean) ** 2 for a in y)
        assert r2_score(y, p) == pytest.approx(1 - ss_res / ss_tot, rel=1e-12)

    def test_constant_target(self):
        with pytest.raises(UndefinedScoreError):
            r2_score(np.ones(4), np.zeros(4))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            r2_score(np.arange(3.0), np.arange(4.0))


def margin_oracle(model, X):
    """Score every class for every row with explicit loops; lowest index wins ties."""
    out = []
    for x in X:
        z = [(x[j] - model.mean[j]) / model.scale[j] for j in range(len(x))]
        best, best_k = None, None
        for k, w in enumerate(model.W):
            s = sum(w[j] * z[j] for j in range(len(z))) + w[-1]
            if best is None or s > best:
                best, best_k = s, k
        out.append(model.classes[best_k])
    return np.array(out)


class TestSVM:
    def test_two_points(self):
        X = np.array([[0.0, 1.0], [1.0, 0.0]])
        model = svm_fit(X, np.array([1, 2]))
        assert list(svm_predict(model, X)) == [1, 2]

    def test_deterministic(self, rng):
        X, y = rng.normal(size=(30, 4)), rng.integers(1, 4, 30)
        a, b = svm_fit(X, y, seed=3), svm_fit(X.copy(), y.copy(), seed=3)
        assert np.array_equal(a.W, b.W)

    def test_three_class_oracle(self, rng):
        centers = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]])
        labels = np.repeat([1, 2, 3], 15)
        X = centers[labels - 1] + 0.3 * rng.normal(size=(45, 2))
        model = svm_fit(X, labels, epochs=30)
        pred = svm_predict(model, X)
        np.testing.assert_array_equal(pred, margin_oracle(model, X))
        assert np.mean(pred == labels) == 1.0

    def test_ties_go_to_lowest_class(self):
        X = np.array([[0.0], [1.0]])
        model = svm_fit(X, np.array([4, 7]), epochs=1)
        model.W[:] = 0
        assert list(svm_predict(model, X)) == [4, 4]

    def test_single_class(self):
        with pytest.raises(ValueError):
            svm_fit(np.zeros((3, 2)), np.ones(3))

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_separable_blobs(self, seed):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(-4, 0.5, (10, 3)), rng.normal(4, 0.5, (10, 3))])
        labels = np.repeat([1, 2], 10)
        assert np.all(svm_predict(svm_fit(X, labels, epochs=20), X) == labels)
