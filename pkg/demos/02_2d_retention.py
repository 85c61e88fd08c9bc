"""2D retention on a small patch grid.

Each cell reads the cells above and to its left, decayed by the Manhattan
distance. The mask printed below is the row for the bottom-right cell, laid
back onto the grid.
"""

import math

import numpy as np

from vir import (
    Grid,
    Rng,
    build_decay_mask_2d,
    fill_uniform,
    retention_2d_parallel,
    retention_2d_recurrent,
    retention_2d_simplified,
)

grid, gamma = Grid(5, 4), 0.5
mask = build_decay_mask_2d(grid, gamma)
corner = grid.index(grid.width, grid.height)
np.set_printoptions(precision=4, suppress=True)
print("weights seen by the bottom-right cell:")
print(mask[corner].reshape(grid.height, grid.width))

rng = Rng(3)
q, k, v = (fill_uniform(rng, (grid.size, 4), -1.0, 1.0) for _ in range(3))
par = retention_2d_parallel(q, k, v, grid, gamma, 2.0)
rec = retention_2d_recurrent(q, k, v, grid, gamma, 2.0)
sim = retention_2d_simplified(q, k, v, grid, gamma, 2.0)
print(f"parallel vs inclusion-exclusion: {abs(par - rec).max():.2e}")
print(f"parallel vs row-state form:      {abs(par - sim).max():.2e}")
