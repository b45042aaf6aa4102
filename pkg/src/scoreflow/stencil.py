"""Neighbour access and central differences honouring the grid boundary mode."""

from __future__ import annotations

import numpy as np

from .field import Boundary


def neighbour(a: np.ndarray, offset: int, axis: int, boundary: Boundary) -> np.ndarray:
    """Array of values at index ``i + offset`` along ``axis``.

    Periodic wraps around; replicate repeats the edge value (zero-gradient padding).
    """
    if Boundary(boundary) is Boundary.PERIODIC:
        return np.roll(a, -offset, axis=axis)
    n = a.shape[axis]
    idx = np.clip(np.arange(n) + offset, 0, n - 1)
    return np.take(a, idx, axis=axis)


def central_diff(a: np.ndarray, axis: int, spacing: float, boundary: Boundary) -> np.ndarray:
    return (neighbour(a, 1, axis, boundary) - neighbour(a, -1, axis, boundary)) / (2.0 * spacing)


def divergence(fx: np.ndarray, fy: np.ndarray, grid) -> np.ndarray:
    return central_diff(fx, 0, grid.dx, grid.boundary) + central_diff(fy, 1, grid.dy, grid.boundary)
