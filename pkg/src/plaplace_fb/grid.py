"""Lattice domains, balls, discrete fields and discrete calculus.

Nodes sit at ``x_i = i*h`` for integer multi-indices ``i`` in ``[-N, N]^dim``.
Cells are the squares (intervals in 1D) between nodes and are indexed by their
lower-left node.  Gradients live on cells and are forward differences taken
from the lower-left corner, so every cell carries a single gradient vector and
affine fields are differentiated exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

# relative tolerance used for "strictly inside" tests
_INSIDE_RTOL = 1e-12


class GridError(ValueError):
    pass


class EmptyBall(GridError):
    """No cell center falls inside the requested ball."""


class OutOfDomain(GridError):
    """A rescaled or interpolated field would need values outside the grid."""


def parse_spacing(h) -> float:
    """Accept floats or strings such as ``"1/128"``."""
    if isinstance(h, str):
        return float(Fraction(h.strip()))
    return float(h)


@dataclass(frozen=True)
class Grid:
    dim: int
    h: float
    extent: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {self.dim}")
        if not self.h > 0:
            raise GridError("spacing h must be positive")
        if self.extent < 1:
            raise GridError("extent must be at least one cell")

    @classmethod
    def unit(cls, dim: int, h) -> "Grid":
        """Grid on [-1, 1]^dim; ``1/h`` must be an integer."""
        h = parse_spacing(h)
        n = round(1.0 / h)
        if n < 1 or abs(n * h - 1.0) > 1e-9:
            raise GridError(f"h={h} does not divide [-1, 1] evenly")
        return cls(dim, 1.0 / n, n)

    @property
    def node_shape(self) -> tuple[int, ...]:
        return (2 * self.extent + 1,) * self.dim

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return (2 * self.extent,) * self.dim

    @property
    def n_nodes(self) -> int:
        return (2 * self.extent + 1) ** self.dim

    @property
    def n_cells(self) -> int:
        return (2 * self.extent) ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def half_width(self) -> float:
        return self.extent * self.h

    def axis(self) -> np.ndarray:
        return np.arange(-self.extent, self.extent + 1) * self.h

    def cell_axis(self) -> np.ndarray:
        return (np.arange(-self.extent, self.extent) + 0.5) * self.h

    def node_coords(self) -> np.ndarray:
        """Array of shape ``node_shape + (dim,)``."""
        axes = [self.axis()] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_centers(self) -> np.ndarray:
        axes = [self.cell_axis()] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def nearest_node(self, point) -> tuple[int, ...]:
        point = np.atleast_1d(np.asarray(point, dtype=float))
        idx = np.rint(point / self.h).astype(int) + self.extent
        if np.any(idx < 0) or np.any(idx > 2 * self.extent):
            raise OutOfDomain(f"point {point} outside grid")
        return tuple(int(i) for i in idx)

    def coarsen(self) -> "Grid":
        if self.extent % 2:
            raise GridError("cannot coarsen a grid with odd extent")
        return Grid(self.dim, 2 * self.h, self.extent // 2)

    def refine(self) -> "Grid":
        return Grid(self.dim, self.h / 2, 2 * self.extent)

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.node_shape))

    def field(self, func) -> "ScalarField":
        """Sample ``func(x)`` where ``x`` has shape ``(..., dim)``."""
        return ScalarField(self, np.asarray(func(self.node_coords()), dtype=float))

    def gradient_operators(self) -> list[sp.csr_matrix]:
        """Sparse forward-difference matrices, one per axis, cells x nodes."""
        return _gradient_operators(self.dim, self.extent, self.h)


_OPERATOR_CACHE: dict = {}


def _gradient_operators(dim, extent, h):
    key = (dim, extent, h)
    if key in _OPERATOR_CACHE:
        return _OPERATOR_CACHE[key]
    m = 2 * extent + 1
    nodes = np.arange(m**dim).reshape((m,) * dim)
    lower = nodes[(slice(0, m - 1),) * dim].ravel()
    ops = []
    for a in range(dim):
        sl = [slice(0, m - 1)] * dim
        sl[a] = slice(1, m)
        upper = nodes[tuple(sl)].ravel()
        nc = lower.size
        rows = np.concatenate([np.arange(nc), np.arange(nc)])
        cols = np.concatenate([upper, lower])
        vals = np.concatenate([np.full(nc, 1.0 / h), np.full(nc, -1.0 / h)])
        ops.append(sp.csr_matrix((vals, (rows, cols)), shape=(nc, m**dim)))
    if len(_OPERATOR_CACHE) > 16:
        _OPERATOR_CACHE.clear()
    _OPERATOR_CACHE[key] = ops
    return ops


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        c = tuple(float(x) for x in np.atleast_1d(self.center))
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise GridError("ball radius must be positive")

    @classmethod
    def unit(cls, dim: int) -> "Ball":
        return cls((0.0,) * dim, 1.0)

    def scaled(self, factor: float) -> "Ball":
        return Ball(self.center, self.radius * factor)

    @property
    def volume(self) -> float:
        """Exact continuum volume."""
        return unit_ball_volume(len(self.center)) * self.radius ** len(self.center)

    def _distance(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        return np.sqrt(np.sum((pts - c) ** 2, axis=-1))

    def cell_mask(self, grid: Grid) -> np.ndarray:
        """Cells whose center lies in the open ball."""
        self._check_dim(grid)
        return self._distance(grid.cell_centers()) < self.radius * (1 - _INSIDE_RTOL)

    def node_mask(self, grid: Grid) -> np.ndarray:
        """Nodes in the open ball."""
        self._check_dim(grid)
        return self._distance(grid.node_coords()) < self.radius * (1 - _INSIDE_RTOL)

    def free_mask(self, grid: Grid) -> np.ndarray:
        """Nodes that a competitor may change.

        A node is free when it lies in the open ball and every cell having it
        as a corner belongs to the ball, so changing it only affects cells
        counted in ball integrals.
        """
        inside = self.node_mask(grid)
        cells = self.cell_mask(grid)
        m = 2 * grid.extent + 1
        ok = np.zeros(grid.node_shape, dtype=bool)
        # ok[k] = all cells k - o (o in {0,1}^dim) exist and are in the ball
        ok[(slice(1, m - 1),) * grid.dim] = True
        for off in itertools.product((0, 1), repeat=grid.dim):
            sl = tuple(slice(1 - o, m - 1 - o) for o in off)
            ok[(slice(1, m - 1),) * grid.dim] &= cells[sl]
        return inside & ok

    def inside_domain(self, grid: Grid) -> bool:
        """Closure of the ball lies in the open grid box."""
        c = np.abs(np.asarray(self.center))
        return bool(np.all(c + self.radius < grid.half_width * (1 + _INSIDE_RTOL)))

    def _check_dim(self, grid: Grid):
        if len(self.center) != grid.dim:
            raise GridError(f"ball of dim {len(self.center)} on grid of dim {grid.dim}")


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.node_shape:
            raise GridError(f"values shape {vals.shape} != {self.grid.node_shape}")
        object.__setattr__(self, "values", _freeze(vals))

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return self.with_values(self.values + other.values)
        return self.with_values(self.values + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            return self.with_values(self.values - other.values)
        return self.with_values(self.values - other)

    def __mul__(self, t):
        return self.with_values(self.values * t)

    __rmul__ = __mul__

    def positive_part(self) -> "ScalarField":
        return self.with_values(np.maximum(self.values, 0.0))

    def cell_values(self) -> np.ndarray:
        """Corner average per cell (midpoint value for multilinear fields)."""
        v = self.values
        m = v.shape[0]
        acc = np.zeros(self.grid.cell_shape)
        for off in itertools.product((0, 1), repeat=self.grid.dim):
            acc += v[tuple(slice(o, m - 1 + o) for o in off)]
        return acc / 2**self.grid.dim

    def corner_min(self) -> np.ndarray:
        v = self.values
        m = v.shape[0]
        out = np.full(self.grid.cell_shape, np.inf)
        for off in itertools.product((0, 1), repeat=self.grid.dim):
            out = np.minimum(out, v[tuple(slice(o, m - 1 + o) for o in off)])
        return out

    def at(self, point) -> float:
        return float(self.values[self.grid.nearest_node(point)])

    def interpolate(self, points) -> np.ndarray:
        """Multilinear interpolation at ``points`` of shape ``(..., dim)``."""
        pts = np.asarray(points, dtype=float)
        lim = self.grid.half_width * (1 + 1e-12)
        if np.any(np.abs(pts) > lim):
            raise OutOfDomain("interpolation point outside the grid")
        pts = np.clip(pts, -self.grid.half_width, self.grid.half_width)
        interp = RegularGridInterpolator(
            (self.grid.axis(),) * self.grid.dim, self.values, method="linear"
        )
        return interp(pts.reshape(-1, self.grid.dim)).reshape(pts.shape[:-1])


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    values: np.ndarray  # cell_shape + (dim,)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        want = self.grid.cell_shape + (self.grid.dim,)
        if vals.shape != want:
            raise GridError(f"values shape {vals.shape} != {want}")
        object.__setattr__(self, "values", _freeze(vals))

    @classmethod
    def constant(cls, grid: Grid, q) -> "VectorField":
        q = np.broadcast_to(np.atleast_1d(np.asarray(q, dtype=float)), (grid.dim,))
        return cls(grid, np.broadcast_to(q, grid.cell_shape + (grid.dim,)))

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=-1))

    def __sub__(self, other):
        if isinstance(other, VectorField):
            return VectorField(self.grid, self.values - other.values)
        return VectorField(self.grid, self.values - np.asarray(other, dtype=float))

    def __add__(self, other):
        if isinstance(other, VectorField):
            return VectorField(self.grid, self.values + other.values)
        return VectorField(self.grid, self.values + np.asarray(other, dtype=float))


def discrete_gradient(u: ScalarField) -> VectorField:
    """Forward differences from each cell's lower-left corner."""
    v = u.values
    m = v.shape[0]
    dim = u.grid.dim
    comps = []
    for a in range(dim):
        hi = [slice(0, m - 1)] * dim
        hi[a] = slice(1, m)
        comps.append((v[tuple(hi)] - v[(slice(0, m - 1),) * dim]) / u.grid.h)
    return VectorField(u.grid, np.stack(comps, axis=-1))


def _magnitudes(g) -> tuple[Grid, np.ndarray]:
    if isinstance(g, VectorField):
        return g.grid, g.norm()
    if isinstance(g, ScalarField):
        return g.grid, np.abs(g.cell_values())
    raise TypeError(f"cannot average {type(g).__name__}")


def ball_average(g, ball: Ball, exponent: float = 1.0) -> float:
    """``(avg over cells in ball of |g|^exponent)^(1/exponent)``."""
    if exponent < 1:
        raise ValueError("exponent must be >= 1")
    grid, mag = _magnitudes(g)
    mask = ball.cell_mask(grid)
    if not mask.any():
        raise EmptyBall(f"no cell center inside {ball}")
    return float(np.mean(mag[mask] ** exponent) ** (1.0 / exponent))


def ball_integral(g, ball: Ball, exponent: float = 1.0) -> float:
    """``sum over cells in ball of |g|^exponent h^dim``."""
    grid, mag = _magnitudes(g)
    mask = ball.cell_mask(grid)
    return float(np.sum(mag[mask] ** exponent) * grid.cell_volume)


def ball_cell_volume(grid: Grid, ball: Ball) -> float:
    return float(ball.cell_mask(grid).sum() * grid.cell_volume)


def rescale(u: ScalarField, r: float, target: Grid | None = None) -> ScalarField:
    """``u_r(x) = u(r x) / r`` sampled on ``target`` (default: the same grid)."""
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    target = target or u.grid
    if target.dim != u.grid.dim:
        raise GridError("target grid has a different dimension")
    if r * target.half_width > u.grid.half_width * (1 + 1e-12):
        raise OutOfDomain("rescaled domain exceeds the source grid")
    if r == 1 and target == u.grid:
        return u
    vals = u.interpolate(r * target.node_coords()) / r
    if np.all(u.values >= 0):
        vals = np.maximum(vals, 0.0)
    return ScalarField(target, vals)


def prolong(u: ScalarField, fine: Grid) -> ScalarField:
    """Multilinear interpolation onto a finer grid covering the same box."""
    return ScalarField(fine, u.interpolate(fine.node_coords()))


# --- plain-text CSV persistence -------------------------------------------

def dump_field(u: ScalarField, path) -> None:
    """Header ``dim,h,extent`` then one grid row per line (row-major)."""
    g = u.grid
    with open(path, "w") as fh:
        fh.write("dim,h,extent\n")
        fh.write(f"{g.dim},{g.h!r},{g.extent}\n")
        rows = u.values.reshape(1, -1) if g.dim == 1 else u.values
        for row in rows:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_field(path) -> ScalarField:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["dim", "h", "extent"]:
            raise GridError(f"bad field header {header}")
        dim, h, extent = fh.readline().strip().split(",")
        grid = Grid(int(dim), float(h), int(extent))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return ScalarField(grid, data.reshape(grid.node_shape))
