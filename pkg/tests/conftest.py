"""Shared fixtures: small grids and configs that keep the numpy model fast."""

import numpy as np
import pytest

from timepillars.config import config_from_dict
from timepillars.numerics import precision

# seeds for randomized gradient checks
SEEDS = range(20)


TINY = {
    "grid": {"x_min": 0.0, "x_max": 16.0, "y_min": -8.0, "y_max": 8.0, "cell": 0.5},
    "pillars": {"channels": 4, "point_budget": 5000},
    "backbone": {"conv_counts": [1, 1, 1], "channel_multipliers": [1, 1, 1], "up_multiplier": 1},
    "model": {"kind": "timepillars", "n_scans": 3},
    "train": {"epochs": 1, "lr": 0.002, "seed": 0},
    "scene": {
        "object_counts": {"vehicle": 2, "cyclist": 1, "pedestrian": 1, "unclear": 0},
        "placement_x": [2.0, 14.0],
        "placement_y": [-6.0, 6.0],
        "ground_points": 200,
        "point_density": {"vehicle": 2000.0, "cyclist": 800.0, "pedestrian": 600.0, "unclear": 300.0},
        "ego_speed_range": [0.0, 5.0],
        "n_scans": 3,
    },
    "eval": {"distance_bins": [[0.0, 8.0], [8.0, None]]},
}


def tiny_dict(**sections):
    """TINY with per-section overrides merged in."""
    data = {name: dict(values) for name, values in TINY.items()}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_config():
    return config_from_dict(tiny_dict())


@pytest.fixture
def make_config():
    def make(**sections):
        return config_from_dict(tiny_dict(**sections))
    return make
