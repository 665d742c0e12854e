"""
Dynamic voxelization and the pillar feature encoder.

Points are grouped into vertical pillars of an x/y grid with no per-pillar
point cap and no padding; every kept point is decorated with its offsets to
the pillar mean and the pillar center, pushed through a pointwise
Conv-BN-ReLU and scatter-maxed into a BEV pseudo-image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dataio import apply_point_budget
from .geometry import GridMeta
from .numerics import ConvBNReLU, Layer, ScatterMax

DECORATION = ("x", "y", "z", "intensity", "xc", "yc", "zc", "xp", "yp")
OUTPUT_STRIDE = 2


@dataclass
class GridSpec:
    """Encoder grid: x range along rows (L), y range along columns (W)."""

    x_min: float = 0.0
    x_max: float = 48.0
    y_min: float = -16.0
    y_max: float = 16.0
    cell: float = 0.5

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        for name, span in (("x", self.x_max - self.x_min), ("y", self.y_max - self.y_min)):
            cells = span / self.cell
            if span <= 0 or abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{name} range {span} m is not a whole number of {self.cell} m cells")

    @property
    def length(self):
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def width(self):
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def shape(self):
        return self.length, self.width

    @property
    def output_shape(self):
        return self.length // OUTPUT_STRIDE, self.width // OUTPUT_STRIDE

    def meta(self, stride=1):
        """GridMeta of a feature map at ``stride`` times the encoder cell."""
        return GridMeta(self.x_min, self.y_min, self.cell * stride)

    @property
    def max_range(self):
        return float(np.hypot(max(abs(self.x_min), abs(self.x_max)), max(abs(self.y_min), abs(self.y_max))))


@dataclass
class PillarConfig:
    channels: int = 16
    point_budget: int = 200000
    decoration: int = len(DECORATION)
    budget_seed: int = 0

    def __post_init__(self):
        if self.decoration != len(DECORATION):
            raise ValueError(f"only the {len(DECORATION)}-channel decoration {DECORATION} is supported")
        if self.channels <= 0:
            raise ValueError(f"encoder channels must be positive, got {self.channels}")
        if self.point_budget <= 0:
            raise ValueError(f"point budget must be positive, got {self.point_budget}")


class Pillarized(NamedTuple):
    decorated: np.ndarray   # (N', 9)
    cell_index: np.ndarray  # (N',) flat row * W + col
    n_dropped: int


def pillarize(points, grid):
    """
    Assign points to pillars and decorate them.

    Args:
        points: (N, 4) x, y, z, intensity
        grid: GridSpec

    Returns:
        Pillarized: decorated (N', 9) points (x, y, z, intensity, xc, yc, zc,
        xp, yp), their flat cell indices and the number of points dropped
        outside [x_min, x_max) x [y_min, y_max)
    """
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 4:
        raise ValueError(f"points must be (N, 4), got shape {points.shape}")
    dtype = points.dtype if np.issubdtype(points.dtype, np.floating) else np.float64
    x, y = points[:, 0], points[:, 1]
    inside = (x >= grid.x_min) & (x < grid.x_max) & (y >= grid.y_min) & (y < grid.y_max)
    kept = points[inside].astype(np.float64)

    length, width = grid.shape
    rows = np.clip(np.floor((kept[:, 0] - grid.x_min) / grid.cell).astype(np.int64), 0, length - 1)
    cols = np.clip(np.floor((kept[:, 1] - grid.y_min) / grid.cell).astype(np.int64), 0, width - 1)
    cell_index = rows * width + cols

    # pillar means via group-by on the flat index
    cells, inverse, counts = np.unique(cell_index, return_inverse=True, return_counts=True)
    means = np.stack([np.bincount(inverse, weights=kept[:, k], minlength=len(cells)) / counts
                      for k in range(3)], axis=1)
    offsets_mean = kept[:, :3] - means[inverse]
    centers = np.column_stack([grid.x_min + (rows + 0.5) * grid.cell, grid.y_min + (cols + 0.5) * grid.cell])
    offsets_center = kept[:, :2] - centers

    decorated = np.hstack([kept, offsets_mean, offsets_center]).astype(dtype)
    return Pillarized(decorated, cell_index, int(len(points) - len(kept)))


def prepare_points(points, pillar_config):
    """Global point budget; the only place the cloud size is ever reduced."""
    return apply_point_budget(points, pillar_config.point_budget, pillar_config.budget_seed)


class PillarEncoder(Layer):
    """
    Pointwise Conv-BN-ReLU over decorated points followed by scatter-max.

    The point set is viewed as a (1, N', 1, D) image so the pointwise linear
    map is a 1x1 convolution and batch norm runs over all N' points.
    """

    def __init__(self, store, grid, pillar_config, name="encoder", rng=None):
        super().__init__()
        self.grid = grid
        self.channels = pillar_config.channels
        self.decoration = pillar_config.decoration
        self.pfn = ConvBNReLU(store, f"{name}.pfn", self.decoration, self.channels, kernel=1, rng=rng)
        self.scatter = ScatterMax(grid.shape)

    @property
    def bn(self):
        return self.pfn.bn

    def forward(self, decorated, cell_index):
        """Returns the (1, L, W, C) pseudo-image."""
        if decorated.ndim != 2 or decorated.shape[1] != self.decoration:
            raise ValueError(f"encoder expects (N, {self.decoration}) decorated points, got {decorated.shape}")
        n_points = len(decorated)
        self._push(n_points)
        length, width = self.grid.shape
        if n_points == 0:
            return np.zeros((1, length, width, self.channels), dtype=self.pfn.conv.kernel.value.dtype)
        features = self.pfn.forward(decorated.reshape(1, n_points, 1, self.decoration))
        grid = self.scatter.forward(features.reshape(n_points, self.channels), cell_index)
        return grid[None]

    def backward(self, dgrid):
        """Gradient w.r.t. the decorated points."""
        n_points = self._pop()
        if n_points == 0:
            return np.zeros((0, self.decoration), dtype=dgrid.dtype)
        dfeat = self.scatter.backward(dgrid[0])
        dx = self.pfn.backward(dfeat.reshape(1, n_points, 1, self.channels))
        return dx.reshape(n_points, self.decoration)

    def clear(self):
        super().clear()
        for layer in self.pfn.layers():
            layer.clear()
        self.scatter.clear()


def encode(pillarized, encoder):
    """Pseudo-image (1, L, W, C) of a pillarized cloud."""
    return encoder.forward(pillarized.decorated, pillarized.cell_index)
