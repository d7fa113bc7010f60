"""Exact image-grid partitioning shared by the descriptor and filter modules.

Cell g of an n-cell split of size S spans [floor(g*S/n), floor((g+1)*S/n)),
which covers every pixel exactly once for any S, including S not divisible
by n.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _bounds_cached(n_cells: int, size: int):
    g = np.arange(n_cells + 1, dtype=np.int64)
    b = (g * size) // n_cells
    b.flags.writeable = False
    return b


def grid_bounds(n_cells: int, size: int) -> np.ndarray:
    """Integer boundaries, length n_cells + 1, first 0, last `size`."""
    return _bounds_cached(int(n_cells), int(size))


def cell_of(coord: np.ndarray, n_cells: int, size: int) -> np.ndarray:
    """Cell index for float coordinate(s) in [0, size)."""
    bounds = grid_bounds(n_cells, size)
    idx = np.searchsorted(bounds, np.asarray(coord, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, n_cells - 1)
