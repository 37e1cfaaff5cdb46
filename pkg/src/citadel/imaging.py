"""Frozen feature-to-pixel layouts and vector-to-image conversion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import ConvexHull, QhullError

from .data import DataError, NormStats, TabularDataset
from .tsne import TsneParams, tsne

LAYOUT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureLayout:
    grid_dim: int
    cells: np.ndarray  # (k, 2) integer (row, col)
    norm: NormStats
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        if len(cells) > self.grid_dim**2:
            raise DataError(f"{len(cells)} features do not fit a {self.grid_dim}x{self.grid_dim} grid")
        if ((cells < 0) | (cells >= self.grid_dim)).any():
            raise DataError("layout cell out of bounds")
        if len({(int(r), int(c)) for r, c in cells}) != len(cells):
            raise DataError("layout cells must be distinct")
        if self.norm.d != len(cells):
            raise DataError("normalization stats do not match feature count")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def k(self) -> int:
        return len(self.cells)

    @property
    def flat_cells(self) -> np.ndarray:
        return self.cells[:, 0] * self.grid_dim + self.cells[:, 1]

    def to_json(self) -> str:
        payload = {
            "format": "citadel-layout",
            "version": LAYOUT_FORMAT_VERSION,
            "grid_dim": self.grid_dim,
            "features": [
                {
                    "name": self.feature_names[i] if self.feature_names else f"f{i}",
                    "row": int(r),
                    "col": int(c),
                    "min": float(self.norm.minimum[i]),
                    "max": float(self.norm.maximum[i]),
                }
                for i, (r, c) in enumerate(self.cells)
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FeatureLayout":
        payload = json.loads(text)
        if payload.get("version") != LAYOUT_FORMAT_VERSION:
            raise DataError(f"unsupported layout version {payload.get('version')!r}")
        feats = payload["features"]
        return cls(
            grid_dim=int(payload["grid_dim"]),
            cells=np.array([[f["row"], f["col"]] for f in feats]),
            norm=NormStats(np.array([f["min"] for f in feats]), np.array([f["max"] for f in feats])),
            feature_names=tuple(f["name"] for f in feats),
        )


def hull_bounding_box(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box of the convex hull of 2-D points.

    Collinear or coincident inputs have no 2-D hull; their extent is used directly.
    """
    try:
        vertices = points[ConvexHull(points).vertices]
    except (QhullError, ValueError):
        vertices = points
    return vertices.min(axis=0), vertices.max(axis=0)


def scale_to_grid(points: np.ndarray, grid_dim: int) -> np.ndarray:
    lo, hi = hull_bounding_box(points)
    span = hi - lo
    centre = (grid_dim - 1) / 2.0
    out = np.empty_like(points, dtype=np.float64)
    for axis in range(2):
        if span[axis] > 0:
            out[:, axis] = (points[:, axis] - lo[axis]) / span[axis] * (grid_dim - 1)
        else:
            out[:, axis] = centre
    return out


def assign_cells(coords: np.ndarray, grid_dim: int) -> np.ndarray:
    """Map continuous grid coordinates to distinct integer cells.

    Nearest-cell snapping when that is already injective, otherwise the
    assignment minimising total squared distance over all grid cells.
    """
    k = len(coords)
    if k > grid_dim**2:
        raise DataError(f"{k} features do not fit a {grid_dim}x{grid_dim} grid")
    snapped = np.clip(np.rint(coords), 0, grid_dim - 1).astype(np.int64)
    if len({(int(r), int(c)) for r, c in snapped}) == k:
        return snapped
    rr, cc = np.divmod(np.arange(grid_dim * grid_dim), grid_dim)
    grid = np.stack([rr, cc], axis=1).astype(np.float64)
    cost = np.sum((coords[:, None, :] - grid[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty((k, 2), dtype=np.int64)
    out[rows] = grid[cols].astype(np.int64)
    return out


def fit_layout(
    train_normals_selected: TabularDataset,
    grid_dim: int = 8,
    tsne_params: TsneParams | None = None,
    seed: int = 0,
) -> FeatureLayout:
    tsne_params = tsne_params or TsneParams()
    k = train_normals_selected.d
    if k > grid_dim**2:
        raise DataError(f"{k} features do not fit a {grid_dim}x{grid_dim} grid")
    if train_normals_selected.n < 5:
        raise DataError("need at least 5 training rows to fit a layout")
    rng = np.random.default_rng(seed)
    embedding = tsne(train_normals_selected.samples.T, tsne_params, rng)
    coords = scale_to_grid(embedding, grid_dim)
    cells = assign_cells(coords, grid_dim)
    return FeatureLayout(grid_dim, cells, NormStats.fit(train_normals_selected.samples), train_normals_selected.feature_names)


def to_images(samples: np.ndarray, layout: FeatureLayout) -> np.ndarray:
    """Batch conversion: (n, k) samples -> (n, d', d') uint8 intensity grids."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != layout.k:
        raise DataError(f"expected {layout.k} features, got {samples.shape[1]}")
    scaled = np.rint(255.0 * layout.norm.apply(samples)).astype(np.uint8)
    flat = np.zeros((samples.shape[0], layout.grid_dim**2), dtype=np.uint8)
    flat[:, layout.flat_cells] = scaled
    return flat.reshape(-1, layout.grid_dim, layout.grid_dim)


def to_image(sample: np.ndarray, layout: FeatureLayout) -> np.ndarray:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 1:
        raise DataError("to_image takes a single feature vector")
    return to_images(sample[None, :], layout)[0]


def write_pgm(image: np.ndarray, path: str | Path) -> None:
    """Plain-text (P2) greyscale dump."""
    image = np.asarray(image)
    rows = [" ".join(str(int(v)) for v in row) for row in image]
    text = f"P2\n{image.shape[1]} {image.shape[0]}\n255\n" + "\n".join(rows) + "\n"
    Path(path).write_text(text, encoding="ascii")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text(encoding="ascii").splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise DataError("not a plain PGM file")
    width, height, _ = (int(t) for t in tokens[1:4])
    return np.array(tokens[4:], dtype=np.int64).reshape(height, width).astype(np.uint8)
