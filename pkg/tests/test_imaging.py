import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from citadel.data import DataError, NormStats, TabularDataset
from citadel.imaging import (
    FeatureLayout,
    assign_cells,
    fit_layout,
    read_pgm,
    scale_to_grid,
    to_image,
    to_images,
    write_pgm,
)
from citadel.tsne import TsneParams, joint_probabilities, kl_and_gradient, tsne

from oracles import best_assignment_cost, central_differences


def _ds(X):
    return TabularDataset(X, np.zeros(len(X)), tuple(f"f{j}" for j in range(X.shape[1])))


def test_three_separated_features_get_distinct_cells():
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(0, 1, 60), rng.normal(50, 5, 60), rng.uniform(-10, 10, 60)])
    layout = fit_layout(_ds(X), 8, seed=1)
    assert layout.k == 3
    assert len({tuple(c) for c in layout.cells.tolist()}) == 3
    assert ((layout.cells >= 0) & (layout.cells < 8)).all()


def test_identical_columns_get_distinct_cells():
    rng = np.random.default_rng(1)
    a = rng.normal(size=40)
    X = np.column_stack([a, a, rng.normal(size=40)])
    layout = fit_layout(_ds(X), 4, seed=2)
    assert len({tuple(c) for c in layout.cells.tolist()}) == 3


def test_collision_resolution_is_optimal():
    coords = np.array([[1.0, 1.0], [1.0, 1.0], [1.1, 0.9], [0.0, 2.0]])
    cells = assign_cells(coords, 3)
    assert len({tuple(c) for c in cells.tolist()}) == 4
    cost = float(np.sum((cells - coords) ** 2))
    assert cost == pytest.approx(best_assignment_cost(coords, 3), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_assignment_matches_enumeration(seed):
    coords = np.random.default_rng(seed).uniform(0, 2, size=(3, 2))
    coords[1] = coords[0]  # force a collision
    cells = assign_cells(coords, 3)
    assert float(np.sum((cells - coords) ** 2)) == pytest.approx(best_assignment_cost(coords, 3), abs=1e-9)


def test_layout_is_deterministic():
    X = np.random.default_rng(3).normal(size=(50, 6))
    a, b = fit_layout(_ds(X), 8, seed=5), fit_layout(_ds(X), 8, seed=5)
    assert np.array_equal(a.cells, b.cells)


def test_scale_to_grid_hits_corners():
    pts = np.array([[0.0, 0.0], [2.0, 4.0], [1.0, 1.0], [2.0, 0.0]])
    out = scale_to_grid(pts, 8)
    assert out.min(axis=0).tolist() == [0.0, 0.0]
    assert out.max(axis=0).tolist() == [7.0, 7.0]


def test_degenerate_embedding_is_centred():
    out = scale_to_grid(np.zeros((3, 2)), 5)
    assert (out == 2.0).all()


def _layout(k=3, grid=4):
    cells = np.array([[0, 0], [1, 2], [3, 3], [2, 1]][:k])
    return FeatureLayout(grid, cells, NormStats(np.zeros(k), np.full(k, 10.0)))


def test_pixel_endpoints_and_clamp():
    layout = _layout()
    img = to_image(np.array([0.0, 10.0, -5.0]), layout)
    assert img[0, 0] == 0 and img[1, 2] == 255 and img[3, 3] == 0
    assert to_image(np.array([5.0, 20.0, 2.5]), layout)[0, 0] == 128


def test_vacant_pixels_with_31_features():
    rng = np.random.default_rng(4)
    X = rng.uniform(1, 2, size=(40, 31))
    layout = fit_layout(_ds(X), 8, TsneParams(n_iter=100), seed=0)
    img = to_image(X[0], layout)
    vacant = 64 - 31
    zero_features = int(np.sum(img.reshape(-1)[layout.flat_cells] == 0))
    assert int(np.sum(img == 0)) == vacant + zero_features


@given(st.lists(st.floats(-20, 30, allow_nan=False), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 15))
def test_pixel_monotone_per_feature(values, j, bump):
    layout = _layout()
    x = np.array(values)
    y = x.copy()
    y[j] += bump
    a, b = to_image(x, layout), to_image(y, layout)
    r, c = layout.cells[j]
    assert b[r, c] >= a[r, c]
    diff = a != b
    diff[r, c] = False
    assert not diff.any()


@given(st.integers(0, 2**32 - 1))
def test_vacant_cells_are_zero(seed):
    layout = _layout(4, 4)
    X = np.random.default_rng(seed).uniform(-50, 50, size=(5, 4))
    imgs = to_images(X, layout).reshape(5, -1)
    vacant = np.setdiff1d(np.arange(16), layout.flat_cells)
    assert imgs[:, vacant].sum() == 0


@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_layout_injective(seed, k):
    X = np.random.default_rng(seed).normal(size=(12, k))
    layout = fit_layout(_ds(X), 3, TsneParams(n_iter=60), seed=seed)
    assert len({tuple(c) for c in layout.cells.tolist()}) == k


def test_layout_json_round_trip():
    layout = FeatureLayout(4, np.array([[0, 1], [2, 3]]), NormStats(np.array([0.5, -1.0]), np.array([2.0, 1.0])), ("a", "b"))
    back = FeatureLayout.from_json(layout.to_json())
    assert np.array_equal(back.cells, layout.cells)
    assert back.feature_names == ("a", "b")
    assert np.array_equal(back.norm.maximum, layout.norm.maximum)


def test_layout_validation():
    with pytest.raises(DataError):
        FeatureLayout(2, np.array([[0, 0], [0, 0]]), NormStats(np.zeros(2), np.ones(2)))
    with pytest.raises(DataError):
        FeatureLayout(2, np.array([[0, 2]]), NormStats(np.zeros(1), np.ones(1)))
    with pytest.raises(DataError):
        fit_layout(_ds(np.ones((10, 5))), 2)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, size=(8, 8)).astype(np.uint8)
    write_pgm(img, tmp_path / "x.pgm")
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_tsne_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    P = joint_probabilities(rng.normal(size=(7, 4)), 2.0)
    Y = rng.normal(size=(7, 2))
    _, grad = kl_and_gradient(Y, P)
    num = central_differences(lambda: kl_and_gradient(Y, P)[0], Y, 1e-6)
    assert np.allclose(grad, num, atol=1e-7)


def test_joint_probabilities_normalised():
    P = joint_probabilities(np.random.default_rng(7).normal(size=(10, 3)), 3.0)
    assert P.sum() == pytest.approx(1.0)
    assert np.allclose(P, P.T)
    assert np.all(np.diag(P) <= np.finfo(float).eps)


def test_tsne_separates_groups():
    rng = np.random.default_rng(8)
    pts = np.vstack([rng.normal(0, 0.1, (6, 5)), rng.normal(10, 0.1, (6, 5))])
    Y = tsne(pts, TsneParams(), np.random.default_rng(0))
    within = np.linalg.norm(Y[:6].mean(0) - Y[:6], axis=1).max()
    between = np.linalg.norm(Y[:6].mean(0) - Y[6:].mean(0))
    assert between > 2 * within


def test_perplexity_rule():
    assert TsneParams().resolve_perplexity(31) == 10
    assert TsneParams().resolve_perplexity(7) == 2
