"""2D retention over a patch grid.

Tokens are serialized in raster order, ``s = (y-1)*W + (x-1)`` with 1-based
cell coordinates ``(x, y)``. A reader at ``(x, y)`` sees every source
``(f, g)`` with ``f <= x`` and ``g <= y``, weighted by
``gamma**((x-f) + (y-g))``. Three evaluators are provided:

* :func:`retention_2d_parallel` -- masked ``(q k^T / scale * M) v``;
* :func:`retention_2d_recurrent` -- inclusion-exclusion recursion over cells,
  keeping one row of accumulators;
* :func:`retention_2d_simplified` -- a running row sum plus one decayed
  accumulator per column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vir import accounting
from vir.errors import DimensionError, ParameterError
from vir.retention1d import _check_gamma, _check_qkv, flush_tiny


@dataclass(frozen=True)
class Grid:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"grid extents must be >= 1, got {self.width}x{self.height}")

    @property
    def size(self) -> int:
        return self.width * self.height

    def coords(self, s: int) -> tuple[int, int]:
        """1-based ``(x, y)`` of raster index ``s``."""
        return s % self.width + 1, s // self.width + 1

    def index(self, x: int, y: int) -> int:
        return (y - 1) * self.width + (x - 1)


def _check_grid(q, grid: Grid) -> None:
    if q.shape[0] != grid.size:
        raise DimensionError(f"{q.shape[0]} tokens do not fill a "
                             f"{grid.width}x{grid.height} grid")


def build_decay_mask_2d(grid: Grid, gamma: float, dtype=np.float64) -> np.ndarray:
    """``M[r, c] = gamma**(dx + dy)`` when source c is in reader r's upper-left quadrant."""
    _check_gamma(gamma)
    s = np.arange(grid.size)
    xs, ys = s % grid.width, s // grid.width
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    visible = (dx >= 0) & (dy >= 0)
    exponent = np.where(visible, dx + dy, 0).astype(dtype)
    return flush_tiny(np.where(visible, np.asarray(gamma, dtype=dtype) ** exponent, 0).astype(dtype))


def retention_2d_parallel(q, k, v, grid: Grid, gamma: float, scale: float) -> np.ndarray:
    _check_qkv(q, k, v, scale)
    _check_grid(q, grid)
    n = grid.size
    accounting.alloc(2 * n * n)
    scores = (q / scale) @ k.T
    scores *= build_decay_mask_2d(grid, gamma, dtype=scores.dtype)
    out = scores @ v
    accounting.free(2 * n * n)
    return out


def retention_2d_recurrent(q, k, v, grid: Grid, gamma: float, scale: float) -> np.ndarray:
    """Inclusion-exclusion recursion.

    ``r(x,y) = g r(x-1,y) + g r(x,y-1) - g^2 r(x-1,y-1) + k^T v`` with the
    first row and first column reducing to the 1D recursion. ``row`` holds
    ``r(., y-1)`` ahead of the cursor and ``r(., y)`` behind it.
    """
    _check_qkv(q, k, v, scale)
    _check_grid(q, grid)
    _check_gamma(gamma)
    dk, dv = q.shape[1], v.shape[1]
    w, h = grid.width, grid.height
    row = np.zeros((w, dk, dv), dtype=np.result_type(q, k, v))
    out = np.empty((grid.size, dv), dtype=row.dtype)
    g2 = gamma * gamma
    accounting.alloc((w + 2) * dk * dv)
    for y in range(h):
        diag = None  # r(x-1, y-1), saved before row[x-1] is overwritten
        for x in range(w):
            s = y * w + x
            z = np.outer(k[s], v[s])
            up = row[x]
            if x == 0 and y == 0:
                r = z
            elif y == 0:
                r = gamma * row[x - 1] + z
            elif x == 0:
                r = gamma * up + z
            else:
                r = gamma * row[x - 1] + gamma * up - g2 * diag + z
            diag = up.copy()
            row[x] = r
            out[s] = (q[s] / scale) @ r
    accounting.free((w + 2) * dk * dv)
    return out


def retention_2d_simplified(q, k, v, grid: Grid, gamma: float, scale: float) -> np.ndarray:
    """Row-state form: ``s_x = g s_x(x-1) + z`` and ``s = g s(y-1) + s_x``."""
    _check_qkv(q, k, v, scale)
    _check_grid(q, grid)
    state = RowState2D.fresh(grid, q.shape[1], v.shape[1], gamma,
                             dtype=np.result_type(q, k, v))
    out = np.empty((grid.size, v.shape[1]), dtype=state.columns.dtype)
    accounting.alloc(state.floats)
    for s in range(grid.size):
        out[s] = (q[s] / scale) @ state.absorb(k[s], v[s])
    accounting.free(state.floats)
    return out


@dataclass
class RowState2D:
    """Streaming state for the row-state form, fed one cell at a time in raster order.

    ``columns[x]`` holds ``s(x, y)`` for the most recent row that reached
    column x; ``row`` holds the running ``s_x`` of the current row.
    """

    grid: Grid
    gamma: float
    columns: np.ndarray
    row: np.ndarray
    position: int = 0

    @classmethod
    def fresh(cls, grid: Grid, dk: int, dv: int, gamma: float, dtype=np.float64) -> "RowState2D":
        _check_gamma(gamma)
        return cls(grid, gamma, np.zeros((grid.width, dk, dv), dtype=dtype),
                   np.zeros((dk, dv), dtype=dtype))

    @property
    def floats(self) -> int:
        return self.columns.size + self.row.size

    def absorb(self, k_s: np.ndarray, v_s: np.ndarray) -> np.ndarray:
        """Add the next raster cell and return its accumulator ``s(x, y)``."""
        if self.position >= self.grid.size:
            raise DimensionError(f"grid of {self.grid.size} cells is already full")
        x, y = self.grid.coords(self.position)
        z = np.outer(k_s, v_s)
        self.row = z if x == 1 else self.gamma * self.row + z
        if y == 1:
            self.columns[x - 1] = self.row
        else:
            self.columns[x - 1] = self.gamma * self.columns[x - 1] + self.row
        self.position += 1
        return self.columns[x - 1]

    def corner(self) -> np.ndarray:
        """Accumulator of the bottom-right cell once the grid is complete."""
        return self.columns[-1]
