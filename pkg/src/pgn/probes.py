"""Linear read-outs: closed-form ridge regression, r^2, and a one-vs-rest linear SVM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

ALPHA_GRID = tuple(10.0 ** k for k in range(-4, 3))


class UndefinedScoreError(ValueError):
    """r^2 requested for a target with zero variance."""


def _design(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be (n, d), got {X.shape}")
    return np.hstack([np.ones((X.shape[0], 1)), X])


def ridge_fit(X: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Coefficients ``[intercept, w_1..w_d]`` of (X~'X~ + alpha I')^-1 X~'y.

    ``X~`` carries a leading column of ones whose coefficient is not penalized.
    ``y`` may be ``(n,)`` or ``(n, k)`` for several targets at once.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    Xt = _design(X)
    y = np.asarray(y, dtype=np.float64)
    if Xt.shape[0] < 1 or y.shape[0] != Xt.shape[0]:
        raise ValueError(f"X has {Xt.shape[0]} rows, y has {y.shape[0]}")
    A = Xt.T @ Xt
    A[np.diag_indices_from(A)] += alpha
    A[0, 0] -= alpha
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"ridge system is singular at alpha={alpha}") from exc
    return linalg.cho_solve(factor, Xt.T @ y)


def ridge_predict(coef: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _design(X) @ coef


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedScoreError("r^2 is undefined for a constant target")
    return 1.0 - float(np.sum((y_true - y_pred) ** 2)) / ss_tot


@dataclass
class RidgeProbe:
    coef: np.ndarray   # (d + 1,) or (d + 1, k)
    alpha: float
    val_r2: float


def fit_probe(X_train, y_train, X_val, y_val, alphas=ALPHA_GRID) -> RidgeProbe:
    """Pick the alpha with the best validation r^2 (first one on ties)."""
    best: RidgeProbe | None = None
    for a in alphas:
        coef = ridge_fit(X_train, y_train, a)
        score = r2_score(y_val, ridge_predict(coef, X_val))
        if best is None or score > best.val_r2:
            best = RidgeProbe(coef, a, score)
    return best


# ---------------------------------------------------------------------------
# Linear SVM
# ---------------------------------------------------------------------------

@dataclass
class LinearSVM:
    classes: np.ndarray     # sorted class labels
    W: np.ndarray           # (n_classes, d + 1); last column is the bias
    mean: np.ndarray        # feature standardization fitted on the training set
    scale: np.ndarray

    def scores(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return Z @ self.W[:, :-1].T + self.W[:, -1]


def svm_fit(X: np.ndarray, labels: np.ndarray, C: float = 1.0, epochs: int = 50, seed: int = 0) -> LinearSVM:
    """One-vs-rest L2-regularized hinge loss by stochastic subgradient descent.

    Each class k solves ``lam/2 |w|^2 + mean_i max(0, 1 - y_ik w.x_i)`` with
    ``lam = 1 / (C n)`` and step ``1 / (lam t)`` at update t (Pegasos schedule).
    All classes share one seeded visiting order per epoch, so the result is a
    deterministic function of the data and seed.  Features are standardized
    with the training mean/std first; a constant feature supplies the bias.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("svm_fit needs at least two classes")
    n, d = X.shape
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = np.hstack([(X - mean) / scale, np.ones((n, 1))])
    Y = np.where(labels[:, None] == classes[None, :], 1.0, -1.0)  # (n, K)
    lam = 1.0 / (C * n)
    # W = s * V keeps the per-step shrink O(1)
    V = np.zeros((classes.size, d + 1))
    s = 1.0
    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            viol = Y[i] * (s * (V @ Z[i])) < 1.0
            shrink = 1.0 - eta * lam
            if shrink == 0.0:
                V[:] = 0.0
                s = 1.0
            else:
                s *= shrink
            if viol.any():
                V[viol] += (eta / s) * Y[i, viol][:, None] * Z[i][None, :]
    W = s * V
    return LinearSVM(classes, W, mean, scale)


def svm_predict(model: LinearSVM, X: np.ndarray) -> np.ndarray:
    """Arg-max class score; ties go to the lowest class index."""
    return model.classes[np.argmax(model.scores(X), axis=1)]
