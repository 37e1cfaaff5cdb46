import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from citadel.data import DataError, TabularDataset
from citadel.features import fit_pca, rank_features, select_top_k, selected_indices


def _ds(X):
    return TabularDataset(X, np.zeros(len(X)), tuple(f"f{j}" for j in range(X.shape[1])))


def test_zero_feature_ranks_last():
    X = np.random.default_rng(0).normal(size=(100, 4))
    X[:, 2] = 0.0
    _, ranking = rank_features(_ds(X))
    assert ranking.scores[2] == pytest.approx(0.0, abs=1e-12)
    assert ranking.order[-1] == 2


def test_duplicate_columns_tie_by_index():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 3)) * [1.0, 3.0, 0.5]
    X = np.column_stack([X[:, 0], X[:, 1], X[:, 1], X[:, 2]])
    _, ranking = rank_features(_ds(X))
    assert ranking.scores[1] == pytest.approx(ranking.scores[2], abs=1e-12)
    order = ranking.order.tolist()
    assert order.index(1) < order.index(2)


def test_two_feature_gaussian_keeps_both_components():
    X = np.random.default_rng(2).multivariate_normal([0, 0], [[4, 0], [0, 1]], size=5000)
    pca, ranking = rank_features(_ds(X), 0.95)
    centered = X - X.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered / (len(X) - 1))
    assert len(pca.components) == 2
    assert pca.explained_variance_ratio[0] == pytest.approx(evals[1] / evals.sum(), rel=1e-10)
    assert pca.explained_variance_ratio[0] < 0.95
    assert np.allclose(ranking.scores, np.abs(evecs).sum(axis=1), atol=1e-10)


def test_threshold_one_component():
    X = np.random.default_rng(3).multivariate_normal([0, 0], [[100, 0], [0, 1]], size=2000)
    pca, ranking = rank_features(_ds(X), 0.95)
    assert len(pca.components) == 1
    assert ranking.order[0] == 0


def test_select_top_k_examples():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 40)) * rng.uniform(0.1, 3.0, 40)
    ds = _ds(X)
    _, ranking = rank_features(ds)
    full = select_top_k(ds, ranking, 40)
    assert sorted(full.feature_names) == sorted(ds.feature_names)
    assert full.feature_names == tuple(f"f{i}" for i in ranking.order)
    one = select_top_k(ds, ranking, 1)
    assert one.feature_names == (f"f{int(np.argmax(ranking.scores))}",)
    top = select_top_k(ds, ranking, 31)
    expected = set(sorted(range(40), key=lambda j: (-ranking.scores[j], j))[:31])
    assert {int(n[1:]) for n in top.feature_names} == expected


def test_select_validation():
    ds = _ds(np.random.default_rng(5).normal(size=(10, 3)))
    _, ranking = rank_features(ds)
    with pytest.raises(DataError):
        select_top_k(ds, ranking, 0)
    with pytest.raises(DataError):
        select_top_k(ds, ranking, 4)


def test_rejects_anomalies_and_constant_data():
    X = np.random.default_rng(6).normal(size=(10, 3))
    with pytest.raises(DataError):
        rank_features(TabularDataset(X, np.r_[np.zeros(9), 1], ("a", "b", "c")))
    with pytest.raises(DataError):
        rank_features(_ds(np.ones((5, 3))))


@given(st.integers(0, 2**32 - 1))
def test_eigenvalues_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6))
    X = rng.multivariate_normal(np.zeros(6), A @ A.T, size=50)
    evals, evecs, _ = fit_pca(X)
    centered = X - X.mean(axis=0)
    cov = np.cov(X, rowvar=False)
    ref = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert np.allclose(evals, np.clip(ref, 0, None), atol=1e-8)
    assert np.allclose(evecs.T @ np.diag(evals) @ evecs, centered.T @ centered / 49, atol=1e-8)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_order_is_scale_invariant(seed, factor):
    X = np.random.default_rng(seed).normal(size=(60, 5)) * [5.0, 4.0, 3.0, 2.0, 1.0]
    _, a = rank_features(_ds(X))
    _, b = rank_features(_ds(X * factor))
    assert np.array_equal(a.order, b.order)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_select_is_idempotent(seed, k):
    ds = _ds(np.random.default_rng(seed).normal(size=(30, 8)))
    _, ranking = rank_features(ds)
    once = select_top_k(ds, ranking, k)
    again = select_top_k(once, ranking.restrict(selected_indices(ranking, k)), k)
    assert again.feature_names == once.feature_names
    assert np.array_equal(again.samples, once.samples)


def test_ranking_csv(tmp_path):
    ds = _ds(np.random.default_rng(7).normal(size=(20, 3)))
    _, ranking = rank_features(ds)
    ranking.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "feature_name,score,rank"
    assert len(lines) == 4
