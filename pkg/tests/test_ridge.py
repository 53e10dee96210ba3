import numpy as np
import pytest

from hipporate.errors import SingularSystem, TooFewSamples
from hipporate.ridge import (
    GramRidge,
    RidgeConfig,
    fit_ridge,
    fold_blocks,
    nested_cv_predict,
    rate_with_ridge,
)


def primal_ridge(X, y, alpha):
    """Independent oracle: solve (Xc^T Xc + alpha I) w = Xc^T yc directly in
    the p-dimensional primal space."""
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.float64)
    mu = X.mean(axis=0)
    Xc = X - mu
    yc = y - y.mean()
    w = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(X.shape[1]), Xc.T @ yc)
    b = y.mean() - mu @ w
    return w, b


def test_orthonormal_design_closed_form():
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((30, 5))
    q, _ = np.linalg.qr(raw - raw.mean(axis=0))   # centered orthonormal columns
    y = rng.standard_normal(30)
    y -= y.mean()
    for alpha in (0.5, 1.0, 4.0):
        w, b = fit_ridge(q, y, alpha)
        assert np.allclose(w, q.T @ y / (1.0 + alpha), atol=1e-10)
        assert abs(b) < 1e-10


def test_large_alpha_shrinks_to_mean():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 10))
    y = rng.standard_normal(40) + 3.0
    w, b = fit_ridge(X, y, 1e12)
    assert np.linalg.norm(w) < 1e-6
    assert np.allclose(X @ w + b, y.mean(), atol=1e-4)


def test_dual_matches_primal_20x50():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((20, 50))
    y = rng.standard_normal(20)
    w_dual, b_dual = fit_ridge(X, y, 0.7)
    w_primal, b_primal = primal_ridge(X, y, 0.7)
    assert np.abs(w_dual - w_primal).max() < 1e-6
    assert abs(b_dual - b_primal) < 1e-6


@pytest.mark.parametrize("seed", range(50))
def test_dual_primal_agreement_random_systems(seed):
    rng = np.random.default_rng([3, seed])
    n = int(rng.integers(5, 100))
    p = int(rng.integers(2, 100))
    X = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    alpha = float(10.0 ** rng.uniform(-2, 2))
    w_dual, b_dual = fit_ridge(X, y, alpha)
    w_primal, b_primal = primal_ridge(X, y, alpha)
    scale = max(1.0, np.abs(w_primal).max())
    assert np.abs(w_dual - w_primal).max() / scale < 1e-6
    assert abs(b_dual - b_primal) / max(1.0, abs(b_primal)) < 1e-6


def test_alpha_must_be_positive():
    X = np.zeros((4, 3))
    with pytest.raises(SingularSystem):
        fit_ridge(X, np.zeros(4), 0.0)
    with pytest.raises(SingularSystem):
        RidgeConfig(alpha_grid=(1.0, -2.0))


def test_config_defaults():
    cfg = RidgeConfig()
    assert cfg.outer_folds == 5
    assert cfg.inner_folds == 6
    assert len(cfg.alpha_grid) == 9
    assert cfg.alpha_grid[0] == pytest.approx(1e-2)
    assert cfg.alpha_grid[-1] == pytest.approx(1e6)


def test_nested_cv_realizable_target():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((60, 5))
    w_true = rng.standard_normal(5)
    y = X @ w_true          # noiseless, linear
    cfg = RidgeConfig(alpha_grid=(1e-6, 1.0, 1e3), seed=0)
    result = nested_cv_predict(X, y, cfg)
    ss_res = float(((result.predictions - y) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    assert 1.0 - ss_res / ss_tot >= 0.99
    assert all(a == 1e-6 for a in result.chosen_alphas)


def test_nested_cv_needs_enough_samples():
    with pytest.raises(TooFewSamples):
        nested_cv_predict(np.zeros((20, 3)), np.zeros(20), RidgeConfig())


def test_fold_blocks_partition():
    rng = np.random.default_rng(5)
    blocks = fold_blocks(23, 5, rng)
    flat = np.concatenate(blocks)
    assert sorted(flat) == list(range(23))
    assert {len(b) for b in blocks} <= {4, 5}


def test_permuted_rows_with_permuted_folds_same_alphas():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((45, 8))
    y = X @ rng.standard_normal(8) + 0.3 * rng.standard_normal(45)
    cfg = RidgeConfig(alpha_grid=(0.01, 1.0, 100.0), inner_folds=6, seed=3)
    folds = fold_blocks(45, 5, np.random.default_rng(7))
    base = nested_cv_predict(X, y, cfg, outer_folds=folds)

    perm = np.random.default_rng(8).permutation(45)
    inverse = np.empty(45, int)
    inverse[perm] = np.arange(45)
    permuted_folds = [np.sort(inverse[f]) for f in folds]
    permuted = nested_cv_predict(X[perm], y[perm], cfg, outer_folds=permuted_folds)
    assert permuted.chosen_alphas == base.chosen_alphas
    assert np.allclose(permuted.predictions, base.predictions[perm], atol=1e-8)


def test_no_leakage_duplicate_sample():
    """A duplicated sample with a corrupted label, placed in the same outer
    fold as the original, must not change the original's out-of-fold
    prediction."""
    rng = np.random.default_rng(9)
    n = 40
    X = rng.standard_normal((n, 6))
    y = X @ rng.standard_normal(6) + 0.1 * rng.standard_normal(n)
    cfg = RidgeConfig(alpha_grid=(0.1, 10.0), seed=1)
    folds = fold_blocks(n, 5, np.random.default_rng(2))
    base = nested_cv_predict(X, y, cfg, outer_folds=folds)

    target = 7                       # sample index under scrutiny
    fold_of_target = next(i for i, f in enumerate(folds) if target in f)
    X_dup = np.vstack([X, X[target]])
    y_dup = np.append(y, y[target] + 100.0)   # corrupted copy
    folds_dup = [f.copy() for f in folds]
    folds_dup[fold_of_target] = np.append(folds_dup[fold_of_target], n)
    dup = nested_cv_predict(X_dup, y_dup, cfg, outer_folds=folds_dup)
    assert dup.predictions[target] == pytest.approx(base.predictions[target],
                                                    abs=1e-10)
    # the target's own fold never trains on the corrupted duplicate
    assert dup.chosen_alphas[fold_of_target] == base.chosen_alphas[fold_of_target]


def test_rate_with_ridge_pipeline():
    rng = np.random.default_rng(10)
    X_pool = rng.standard_normal((60, 12))
    w_true = rng.standard_normal(12)
    y_pool = X_pool @ w_true + 0.05 * rng.standard_normal(60)
    X_test = rng.standard_normal((20, 12))
    y_test = X_test @ w_true
    cfg = RidgeConfig(alpha_grid=(1e-4, 1.0, 1e4), seed=2)
    preds, final_alpha, cv = rate_with_ridge(X_pool, y_pool, X_test, cfg)
    assert final_alpha in (1e-4, 1.0, 1e4)
    corr = np.corrcoef(preds, y_test)[0, 1]
    assert corr > 0.99
    # the precomputed-cross path agrees with the direct one
    gram = GramRidge(X_pool)
    preds2, _, _ = rate_with_ridge(X_pool, y_pool, X_test, cfg, gram=gram,
                                   cross=X_test @ X_pool.T)
    assert np.allclose(preds, preds2)
