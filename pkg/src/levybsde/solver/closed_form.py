from __future__ import annotations

import numpy as np

from ..generator import envelope_integral
from ..levy import TimeGrid, as_grid

QUAD_RTOL = 1e-10


def closed_form_linear(A_xi: float, a, k_f, grid: TimeGrid) -> np.ndarray:
    """``A_xi exp(int_t^T a) + int_t^T k_f(s) exp(int_t^s a) ds`` at every grid node."""
    grid = as_grid(grid)
    T = grid.T
    return np.array([
        envelope_integral(float(A_xi), k_f, a, float(t), T, rtol=QUAD_RTOL, what="closed form")
        for t in grid.nodes
    ])
