"""p-harmonic replacement and the averaged Jacobian of the flux.

The replacement minimizes ``sum_cells (|grad v|^2 + delta^2)^(p/2) h^dim`` over
the free nodes of a ball (see :meth:`Ball.free_mask`), all other nodes keeping
the values of ``u``.  The energy is smooth and convex, so a descent method with
a backtracking line search converges from any start; Newton or Picard
directions supply the speed.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .energy import check_exponent, flux
from .grid import Ball, Grid, ScalarField, ball_average, discrete_gradient, prolong

# coarsest extent used by the coarse-to-fine start
_COARSEST = 8
_COARSE_TOL = 1e-6

log = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


class HypothesisViolated(ValueError):
    pass


@dataclass
class ReplacementResult:
    v: ScalarField
    iterations: int
    residual: float
    energy: float
    trace: list = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "energy", "decrement", "step", "direction"])
            w.writerows(self.trace)


_PATTERN_CACHE: dict = {}


class DirichletProblem:
    """Regularized p-energy of a field as a function of its free nodal values.

    Each cell's gradient depends on its lower-left node ``k`` and on the nodes
    ``k + e_a``; those ``dim + 1`` nodes are stored per cell so that energy,
    gradient and Hessian are assembled cell by cell.
    """

    def __init__(self, grid: Grid, fixed_values: np.ndarray, free: np.ndarray,
                 p: float, delta: float, cell_weights: np.ndarray | None = None):
        self.grid, self.p, self.delta = grid, p, delta
        self.dim = grid.dim
        self.free = np.asarray(free, dtype=bool)
        self.free_idx = np.flatnonzero(self.free.ravel())
        self.base = np.array(fixed_values, dtype=float).ravel()
        self.dv = grid.cell_volume
        self.inv_h = 1.0 / grid.h
        m = 2 * grid.extent + 1
        nodes = np.arange(m**grid.dim).reshape(grid.node_shape)
        low = (slice(0, m - 1),) * grid.dim
        local = [nodes[low].ravel()]
        for a in range(grid.dim):
            sl = [slice(0, m - 1)] * grid.dim
            sl[a] = slice(1, m)
            local.append(nodes[tuple(sl)].ravel())
        local = np.stack(local, axis=1)
        slot = np.full(grid.n_nodes, -1)
        slot[self.free_idx] = np.arange(self.free_idx.size)
        lslot = slot[local]
        keep = np.any(lslot >= 0, axis=1)
        if cell_weights is not None:
            keep &= np.asarray(cell_weights).ravel() > 0
        self.cells = np.flatnonzero(keep)
        self.local = local[keep]
        self.lslot = lslot[keep]
        self._pattern = None
        self._factor = None

    @property
    def n(self) -> int:
        return self.free_idx.size

    def full_vector(self, x) -> np.ndarray:
        out = self.base.copy()
        out[self.free_idx] = x
        return out

    def full(self, x) -> np.ndarray:
        return self.full_vector(x).reshape(self.grid.node_shape)

    def gradients(self, x: np.ndarray) -> np.ndarray:
        vals = self.full_vector(x)[self.local]
        return (vals[:, 1:] - vals[:, :1]) * self.inv_h

    def energy(self, x, g=None) -> float:
        g = self.gradients(x) if g is None else g
        s = np.einsum("ij,ij->i", g, g) + self.delta**2
        return float(np.sum(s ** (self.p / 2)) * self.dv)

    def _scatter(self, local_vals: np.ndarray) -> np.ndarray:
        ok = self.lslot >= 0
        return np.bincount(self.lslot[ok], weights=local_vals[ok], minlength=self.n)

    def _flux_to_nodes(self, F: np.ndarray) -> np.ndarray:
        # d/dx of sum_c F_c . g_c: node k gets -sum_a F_a, node k+e_a gets F_a
        loc = np.empty(self.local.shape)
        loc[:, 0] = -F.sum(axis=1)
        loc[:, 1:] = F
        return self._scatter(loc * (self.inv_h * self.dv))

    def gradient(self, x, g=None) -> np.ndarray:
        g = self.gradients(x) if g is None else g
        s = np.einsum("ij,ij->i", g, g) + self.delta**2
        w = self.p * s ** ((self.p - 2) / 2)
        return self._flux_to_nodes(w[:, None] * g)

    def _local_hessians(self, g, picard):
        s = np.einsum("ij,ij->i", g, g) + self.delta**2
        w = self.p * s ** ((self.p - 2) / 2)
        eye = np.eye(self.dim)
        if picard:
            Hc = w[:, None, None] * eye
        else:
            Hc = w[:, None, None] * (eye + (self.p - 2) * g[:, :, None] * g[:, None, :]
                                     / s[:, None, None])
        Hc *= self.dv * self.inv_h**2
        K = np.empty((Hc.shape[0], self.dim + 1, self.dim + 1))
        K[:, 1:, 1:] = Hc
        K[:, 0, 1:] = -Hc.sum(axis=1)
        K[:, 1:, 0] = -Hc.sum(axis=2)
        K[:, 0, 0] = Hc.sum(axis=(1, 2))
        return K

    def _build_pattern(self):
        ident = (self.n, self.lslot.shape, hash(self.lslot.tobytes()))
        cached = _PATTERN_CACHE.get(ident)
        if cached is not None:
            self._pattern = cached
            return
        nl = self.dim + 1
        ri = np.repeat(self.lslot[:, :, None], nl, axis=2)
        ci = np.repeat(self.lslot[:, None, :], nl, axis=1)
        ok = (ri >= 0) & (ci >= 0) & (ri >= ci)
        key = ci[ok].astype(np.int64) * self.n + ri[ok]
        uniq, pos = np.unique(key, return_inverse=True)
        rows, cols = uniq % self.n, uniq // self.n
        self._pattern = (ok, pos, rows, cols, uniq.size)
        if len(_PATTERN_CACHE) > 32:
            _PATTERN_CACHE.clear()
        _PATTERN_CACHE[ident] = self._pattern

    def hessian_lower(self, x, g=None, picard=False):
        """Lower triangle of the Hessian in column-major order: (values, rows, cols)."""
        g = self.gradients(x) if g is None else g
        if self._pattern is None:
            self._build_pattern()
        ok, pos, rows, cols, nnz = self._pattern
        K = self._local_hessians(g, picard)
        vals = np.bincount(pos, weights=K[ok], minlength=nnz)
        return vals, rows, cols

    def hessian(self, x, g=None, picard=False) -> sp.csc_matrix:
        vals, rows, cols = self.hessian_lower(x, g, picard)
        L = sp.csc_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        return (L + sp.tril(L, -1).T).tocsc()

    def newton_direction(self, x, g, grad, picard=False) -> np.ndarray:
        """Solve ``H d = -grad`` (or the Picard system) by sparse Cholesky."""
        if self._pattern is None:
            self._build_pattern()
        ok, pos, rows, cols, nnz = self._pattern
        K = self._local_hessians(g, picard)
        vals = np.bincount(pos, weights=K[ok], minlength=nnz)
        if self._factor is None:
            self._factor = _Cholesky(self.n, rows, cols, self.grid, self.free_idx)
        self._factor.factor(vals)
        return self._factor.solve(-grad)

    def weak_residual(self, x) -> float:
        """Max nodal defect of the unregularized discrete weak form."""
        if self.n == 0:
            return 0.0
        r = self._flux_to_nodes(flux(self.gradients(x), self.p))
        return float(np.max(np.abs(r)))


_SYMBOLIC_CACHE: dict = {}


def _dissection_order(coords: np.ndarray, h: float) -> np.ndarray:
    """Geometric nested dissection of lattice points (separators last)."""
    out = []

    def split(idx):
        if idx.size <= 64:
            out.append(idx)
            return
        c = coords[idx]
        ax = int(np.argmax(np.ptp(c, axis=0)))
        v = c[:, ax]
        line = np.round(np.median(v) / h) * h
        split(idx[v < line - h / 4])
        split(idx[v > line + h / 4])
        out.append(idx[np.abs(v - line) <= h / 4])

    split(np.arange(coords.shape[0]))
    return np.concatenate(out)


_RANK_CACHE: dict = {}


def _grid_rank(grid: Grid) -> np.ndarray:
    """Position of every node in a dissection order of the whole grid.

    Restricting this order to any subset of nodes is again a good fill-reducing
    order, so it is computed once per grid.
    """
    key = (grid.dim, grid.extent)
    if key not in _RANK_CACHE:
        order = _dissection_order(grid.node_coords().reshape(-1, grid.dim), grid.h)
        rank = np.empty(order.size, dtype=np.int64)
        rank[order] = np.arange(order.size)
        _RANK_CACHE[key] = rank
    return _RANK_CACHE[key]


class _Cholesky:
    """CHOLMOD factor (via cvxopt) of SPD matrices with a fixed lower pattern.

    The symbolic analysis is shared between problems with the same pattern.
    SuperLU is the fallback when cvxopt is unavailable.
    """

    def __init__(self, n, rows, cols, grid, free_idx):
        self.n, self.rows, self.cols = n, rows, cols
        self.grid, self.free_idx = grid, free_idx
        self.key = (n, rows.size, hash(rows.tobytes()), hash(cols.tobytes()))
        self._lu = None

    def factor(self, vals):
        try:
            import cvxopt
            import cvxopt.cholmod as cholmod
        except ImportError:  # pragma: no cover
            from scipy.sparse.linalg import splu
            L = sp.csc_matrix((vals, (self.rows, self.cols)), shape=(self.n, self.n))
            self._lu = splu((L + sp.tril(L, -1).T).tocsc())
            return
        entry = _SYMBOLIC_CACHE.get(self.key)
        if entry is None:
            A = cvxopt.spmatrix(vals, self.rows.tolist(), self.cols.tolist(), (self.n, self.n))
            kw = {}
            if self.grid.dim == 2:
                rank = _grid_rank(self.grid)[self.free_idx]
                kw["p"] = cvxopt.matrix(np.argsort(rank, kind="stable").tolist())
            F = cholmod.symbolic(A, uplo="L", **kw)
            if len(_SYMBOLIC_CACHE) > 32:
                _SYMBOLIC_CACHE.clear()
            entry = _SYMBOLIC_CACHE[self.key] = (A, F)
        A, F = entry
        A.V = cvxopt.matrix(vals)
        cholmod.numeric(A, F)  # ArithmeticError if not positive definite

    def solve(self, rhs) -> np.ndarray:
        if self._lu is not None:  # pragma: no cover
            return self._lu.solve(np.asarray(rhs, dtype=float))
        import cvxopt
        import cvxopt.cholmod as cholmod
        b = cvxopt.matrix(np.asarray(rhs, dtype=float))
        cholmod.solve(_SYMBOLIC_CACHE[self.key][1], b)
        return np.array(b).ravel()


def _armijo(prob, x, E, d, dec, t_min=1e-14):
    """Backtrack from the full step; returns (t, x_new, g_new, E_new) or None."""
    t = 1.0
    while t >= t_min:
        xt = x + t * d
        gt = prob.gradients(xt)
        Et = prob.energy(xt, gt)
        if Et <= E - 1e-4 * t * dec:
            return t, xt, gt, Et
        t *= 0.5
    return None


def _poor_model(step, E, dec) -> bool:
    """Damped step, or a realized decrease far below the quadratic model's.

    For p < 2 Newton steps overshoot near zero gradients (on ``|x|^q`` with
    ``q < 2`` the full step maps ``x`` to ``-x``) while other cells still let
    the line search pass.
    """
    t, _, _, Et = step
    return t < 1 or (E - Et) < 0.25 * 0.5 * dec


def descend(prob: DirichletProblem, x0: np.ndarray, tol: float, max_iter: int,
            method: str = "newton") -> tuple[np.ndarray, int, list]:
    """Minimize a convex :class:`DirichletProblem` by line-searched descent.

    Stops when the Newton-type decrement ``-grad . d`` falls below
    ``tol * max(E, E_floor)``, or when a full Newton step lowers the energy by
    less than that.  A direction that fails to be a descent
    direction is replaced by the negative gradient.  For ``p < 2`` a damped or
    poorly predicted Newton step is compared with a Picard step, which
    majorizes the energy there and so never needs damping.
    """
    x = np.array(x0, dtype=float)
    if prob.n == 0:
        return x, 0, []
    trace = []
    g = prob.gradients(x)
    E = prob.energy(x, g)
    # dimensional floor so tiny energies do not demand absurd relative accuracy
    floor = prob.dv * prob.cells.size * prob.delta**prob.p + 1e-300
    for it in range(1, max_iter + 1):
        grad = prob.gradient(x, g)
        kind = method
        try:
            d = prob.newton_direction(x, g, grad, picard=(method == "picard"))
            if not np.all(np.isfinite(d)):
                raise FloatingPointError
        except (ArithmeticError, ValueError):  # singular or non-finite system
            d, kind = -grad, "gradient"
        dec = -float(grad @ d)
        if dec <= 0:
            d, kind = -grad, "gradient"
            dec = float(grad @ grad)
        if dec <= tol * max(abs(E), floor):
            trace.append((it, E, dec, 0.0, kind))
            return x, it, trace
        step = _armijo(prob, x, E, d, dec)
        if kind == "newton" and prob.p < 2 and (step is None or _poor_model(step, E, dec)):
            dp = prob.newton_direction(x, g, grad, picard=True)
            alt = _armijo(prob, x, E, dp, -float(grad @ dp), t_min=1.0)
            if alt is not None and (step is None or alt[3] < step[3]):
                step, kind, dec = alt, "picard", -float(grad @ dp)
        if step is None and kind != "gradient":
            kind, dec = "gradient", float(grad @ grad)
            step = _armijo(prob, x, E, -grad, dec)
        if step is None:
            # no further decrease representable in floating point
            trace.append((it, E, dec, 0.0, kind))
            return x, it, trace
        t, xt, gt, Et = step
        trace.append((it, Et, dec, t, kind))
        rel_drop = (E - Et) / max(abs(E), floor)
        x, g, E = xt, gt, Et
        if kind == "newton" and t == 1.0 and rel_drop < tol:
            # an undamped Newton step converges quadratically from here on
            return x, it, trace
        if rel_drop < tol * 1e-3 and kind == "gradient":
            return x, it, trace
    raise NonConvergence(f"descent did not converge in {max_iter} iterations", trace)


def data_scale(u: ScalarField, ball: Ball) -> float:
    gn = discrete_gradient(u).norm()[ball.cell_mask(u.grid)]
    s = float(gn.max()) if gn.size else 0.0
    return s if s > 0 else 1.0


def p_harmonic_replacement(u: ScalarField, ball: Ball, p: float, tol: float = 1e-10,
                           delta_reg: float | None = None, max_iter: int = 200,
                           method: str = "newton", initial: ScalarField | None = None,
                           multilevel: bool = True) -> ReplacementResult:
    """p-harmonic replacement of ``u`` in ``ball``.

    ``delta_reg`` defaults to ``1e-8`` times the largest gradient of ``u`` in
    the ball.  The reported residual is the unregularized weak-form defect.
    Without an ``initial`` guess the problem is first solved on coarser grids
    (boundary values by injection) and the result prolonged as a start.
    """
    p = check_exponent(p)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if delta_reg is None:
        delta_reg = 1e-8 * data_scale(u, ball)
    if delta_reg < 0:
        raise ValueError("delta_reg must be nonnegative")
    free = ball.free_mask(u.grid)
    prob = DirichletProblem(u.grid, u.values, free, p, delta_reg,
                            cell_weights=ball.cell_mask(u.grid))
    if initial is None and multilevel and u.grid.extent % 2 == 0 \
            and u.grid.extent >= 2 * _COARSEST:
        coarse = ScalarField(u.grid.coarsen(), u.values[(slice(None, None, 2),) * u.grid.dim])
        # the coarse solve only has to beat its own O(h^2) discretization error
        initial = prolong(p_harmonic_replacement(coarse, ball, p, max(tol, _COARSE_TOL),
                                                 delta_reg, max_iter, method).v, u.grid)
    start = (initial or u).values.ravel()[prob.free_idx]
    x, its, trace = descend(prob, start, tol, max_iter, method)
    v = ScalarField(u.grid, prob.full(x))
    mask = ball.cell_mask(u.grid)
    energy = float(np.sum(discrete_gradient(v).norm()[mask] ** p) * u.grid.cell_volume)
    return ReplacementResult(v, its, prob.weak_residual(x), energy, trace)


def affine_fit_slope(v: ScalarField, point=None) -> np.ndarray:
    """Least-squares slope of ``v`` over the 3^dim nodes around ``point``."""
    grid = v.grid
    point = np.zeros(grid.dim) if point is None else np.atleast_1d(point)
    k = np.array(grid.nearest_node(point))
    offsets = np.array(np.meshgrid(*[[-1, 0, 1]] * grid.dim, indexing="ij")).reshape(grid.dim, -1).T
    idx = k + offsets
    if np.any(idx < 0) or np.any(idx > 2 * grid.extent):
        raise ValueError("stencil leaves the grid")
    vals = v.values[tuple(idx.T)]
    A = np.column_stack([np.ones(len(offsets)), offsets * grid.h])
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return coef[1:]


# --- averaged Jacobian of F(z) = |z|^(p-2) z ---------------------------------

@dataclass(frozen=True)
class EllipticityBounds:
    lam: float
    Lam: float

    @classmethod
    def for_p(cls, p: float) -> "EllipticityBounds":
        p = check_exponent(p)
        if p >= 2:
            return cls(2.0 ** (2 - p), (p - 1) * 1.5 ** (p - 2))
        return cls((p - 1) * 1.5 ** (p - 2), 2.0 ** (2 - p))


def flux_jacobian(z: np.ndarray, p: float) -> np.ndarray:
    """``DF(z) = (p-2)|z|^(p-4) z z^T + |z|^(p-2) Id`` for stacked ``z``."""
    z = np.asarray(z, dtype=float)
    n2 = np.sum(z**2, axis=-1)[..., None, None]
    eye = np.eye(z.shape[-1])
    outer = z[..., :, None] * z[..., None, :]
    return (p - 2) * n2 ** ((p - 4) / 2) * outer + n2 ** ((p - 2) / 2) * eye


def averaged_jacobian(q, eta, p: float, quad_nodes: int = 8) -> np.ndarray:
    """``A(x) = int_0^1 DF(q + t eta(x)) dt`` by Gauss-Legendre in ``t``.

    ``eta`` may be a VectorField or an array of shape ``(..., dim)``; returns
    matrices of shape ``(..., dim, dim)``.
    """
    p = check_exponent(p)
    if quad_nodes < 2:
        raise ValueError("need at least two quadrature nodes")
    q = np.atleast_1d(np.asarray(q, dtype=float))
    eta = np.asarray(getattr(eta, "values", eta), dtype=float)
    if np.any(np.linalg.norm(eta, axis=-1) >= np.linalg.norm(q) / 2):
        raise HypothesisViolated("|eta| must stay below |q|/2 everywhere")
    t, w = np.polynomial.legendre.leggauss(quad_nodes)
    t, w = 0.5 * (t + 1), 0.5 * w
    A = sum(wi * flux_jacobian(q + ti * eta, p) for ti, wi in zip(t, w))
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def interior_gradient_bound_check(v: ScalarField, ball: Ball, p: float = 2.0
                                  ) -> tuple[float, float, float]:
    """Sup of ``|grad v|`` on the concentric half ball, the full-ball L^p average
    of ``|grad v|``, and their ratio."""
    gv = discrete_gradient(v)
    half = ball.scaled(0.5).cell_mask(v.grid)
    sup_half = float(gv.norm()[half].max())
    avg = ball_average(gv, ball, p)
    ratio = sup_half / avg if avg > 0 else (0.0 if sup_half == 0 else np.inf)
    return sup_half, avg, ratio
