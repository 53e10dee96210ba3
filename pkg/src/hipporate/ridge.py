"""Ridge regression on flattened ROI voxels, solved in the dual (Gram)
form because the voxel count dwarfs the sample count, with nested
cross-validation (5 outer / 6 inner folds) for the regularization weight."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularSystem, TooFewSamples


def _default_alpha_grid() -> tuple[float, ...]:
    return tuple(np.logspace(-2, 6, 9))


@dataclass(frozen=True)
class RidgeConfig:
    alpha_grid: tuple[float, ...] = field(default_factory=_default_alpha_grid)
    outer_folds: int = 5
    inner_folds: int = 6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(sorted(self.alpha_grid)))
        if any(a <= 0 for a in self.alpha_grid):
            raise SingularSystem("alpha grid must be strictly positive")


def fit_ridge(X: np.ndarray, y: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    """Minimize ||y - Xw - b||^2 + alpha ||w||^2 with an unpenalized
    intercept; solved through the n x n Gram system, w = Xc^T a."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] < 2 or X.shape[0] != y.size:
        raise TooFewSamples(f"need n >= 2 samples, got X {X.shape}, y {y.shape}")
    if alpha <= 0:
        raise SingularSystem(f"alpha must be positive, got {alpha}")
    mu = X.mean(axis=0)
    ybar = float(y.mean())
    Xc = X - mu
    K = (Xc @ Xc.T).astype(np.float64)
    K[np.diag_indices_from(K)] += alpha
    dual = np.linalg.solve(K, y - ybar)
    w = Xc.T.astype(np.float64) @ dual
    b = ybar - float(mu.astype(np.float64) @ w)
    return w, b


class GramRidge:
    """Shared-Gram solver: compute X X^T once, then fit/predict any
    (y, train, eval) combination with training-fold centering applied
    through the Gram algebra, never touching the p-dimensional space."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X)
        if X.shape[0] < 2:
            raise TooFewSamples("need at least 2 samples")
        self.n = X.shape[0]
        self.K = (X @ X.T).astype(np.float64)

    def fit_dual(self, y: np.ndarray, train_idx: np.ndarray, alpha: float):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        train_idx = np.asarray(train_idx)
        Kt = self.K[np.ix_(train_idx, train_idx)]
        row_mean = Kt.mean(axis=1)
        grand = float(Kt.mean())
        Kc = Kt - row_mean[:, None] - row_mean[None, :] + grand
        Kc[np.diag_indices_from(Kc)] += alpha
        ybar = float(y[train_idx].mean())
        dual = np.linalg.solve(Kc, y[train_idx] - ybar)
        return dual, ybar, row_mean, grand, train_idx

    def predict(self, model, eval_idx: np.ndarray) -> np.ndarray:
        dual, ybar, row_mean, grand, train_idx = model
        Ke = self.K[np.ix_(np.asarray(eval_idx), train_idx)]
        eval_mean = Ke.mean(axis=1)
        Kc = Ke - eval_mean[:, None] - row_mean[None, :] + grand
        return Kc @ dual + ybar

    def predict_cross(self, model, cross: np.ndarray) -> np.ndarray:
        """Predict external rows given their raw Gram block against the
        full training pool (cross = X_new @ X_pool^T); the model must have
        been fitted on all pool rows."""
        dual, ybar, row_mean, grand, train_idx = model
        if len(train_idx) != self.n:
            raise TooFewSamples("predict_cross needs a model fitted on the full pool")
        cross = np.asarray(cross, dtype=np.float64)
        eval_mean = cross.mean(axis=1)
        Kc = cross - eval_mean[:, None] - row_mean[None, :] + grand
        return Kc @ dual + ybar

    def fit_predict(self, y, train_idx, eval_idx, alpha) -> np.ndarray:
        return self.predict(self.fit_dual(y, train_idx, alpha), eval_idx)


def fold_blocks(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle, then k contiguous blocks."""
    perm = rng.permutation(n)
    return [np.sort(block) for block in np.array_split(perm, k)]


@dataclass
class NestedCvResult:
    predictions: np.ndarray            # out-of-fold, aligned with the input rows
    chosen_alphas: list[float]         # one per outer fold
    outer_folds: list[np.ndarray]
    inner_mse: list[dict[float, float]]


def nested_cv_predict(X: np.ndarray, y: np.ndarray, cfg: RidgeConfig,
                      outer_folds: list[np.ndarray] | None = None,
                      gram: GramRidge | None = None) -> NestedCvResult:
    """Out-of-fold predictions with the regularization weight re-chosen per
    outer fold by inner-CV mean squared error. An explicit outer fold
    assignment can be injected (leakage tests use this)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.size
    if n < cfg.outer_folds * cfg.inner_folds:
        raise TooFewSamples(
            f"nested CV needs n >= {cfg.outer_folds * cfg.inner_folds}, got {n}")
    if gram is None:
        gram = GramRidge(X)
    if outer_folds is None:
        outer_folds = fold_blocks(n, cfg.outer_folds,
                                  np.random.default_rng([cfg.seed, 0]))
    predictions = np.full(n, np.nan)
    chosen = []
    inner_tables = []
    for f, test_idx in enumerate(outer_folds):
        train_pool = np.setdiff1d(np.arange(n), test_idx)
        inner = fold_blocks(len(train_pool), cfg.inner_folds,
                            np.random.default_rng([cfg.seed, 1, f]))
        mse_by_alpha = {}
        for alpha in cfg.alpha_grid:
            errs = []
            for block in inner:
                val_idx = train_pool[block]
                fit_idx = np.setdiff1d(train_pool, val_idx)
                pred = gram.fit_predict(y, fit_idx, val_idx, alpha)
                errs.append(float(((pred - y[val_idx]) ** 2).mean()))
            mse_by_alpha[float(alpha)] = float(np.mean(errs))
        best_alpha = min(mse_by_alpha, key=lambda a: (mse_by_alpha[a], a))
        chosen.append(best_alpha)
        inner_tables.append(mse_by_alpha)
        predictions[test_idx] = gram.fit_predict(y, train_pool, test_idx, best_alpha)
    return NestedCvResult(predictions=predictions, chosen_alphas=chosen,
                          outer_folds=outer_folds, inner_mse=inner_tables)


def rate_with_ridge(X_pool: np.ndarray, y_pool: np.ndarray, X_test: np.ndarray,
                    cfg: RidgeConfig, gram: GramRidge | None = None,
                    cross: np.ndarray | None = None) -> tuple[np.ndarray, float, NestedCvResult]:
    """Nested CV on the training pool to pick the regularization weight (the
    modal choice across outer folds, smaller alpha on ties), then a final fit
    on the whole pool predicts the held-out test rows.

    `cross` may carry a precomputed X_test @ X_pool^T block."""
    if gram is None:
        gram = GramRidge(X_pool)
    cv = nested_cv_predict(X_pool, y_pool, cfg, gram=gram)
    counts = {}
    for a in cv.chosen_alphas:
        counts[a] = counts.get(a, 0) + 1
    final_alpha = min(counts, key=lambda a: (-counts[a], a))
    model = gram.fit_dual(y_pool, np.arange(len(y_pool)), final_alpha)
    if cross is None:
        cross = np.asarray(X_test) @ np.asarray(X_pool).T
    return gram.predict_cross(model, cross), final_alpha, cv
