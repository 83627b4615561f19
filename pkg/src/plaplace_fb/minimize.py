"""Discrete minimizers and almost minimizers of J_p, and the almost-minimality check.

``minimize_Jp`` alternates a p-harmonic solve on the current positivity set
(zero on the rest) with sweeps of single-node flips: a positive node may be
set to zero and a zero node may be raised to its best local value.  Flips are
scored exactly, including the volume term, and applied one parity color at a
time so that no two flipped nodes share a cell.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as sp_minimize

from .energy import check_exponent, eval_Jp
from .grid import Ball, Grid, ScalarField, discrete_gradient, prolong
from .pharmonic import DirichletProblem, NonConvergence, data_scale, descend

log = logging.getLogger(__name__)

_COARSEST = 8
_MAX_HALVINGS = 4


class NegativeBoundary(ValueError):
    pass


@dataclass(frozen=True)
class AlmostMinParams:
    kappa: float
    beta: float

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def sigma(self, radius: float) -> float:
        return self.kappa * radius**self.beta


@dataclass
class MinimizeReport:
    u: ScalarField
    outer_iterations: int
    final_energy: float
    active_set_changes: int
    trace: list = field(default_factory=list)
    coarse: "MinimizeReport | None" = None  # report of the next coarser level, if used


def _color_masks(grid: Grid):
    """Parity classes of nodes; two nodes of one class never share a cell."""
    idx = np.indices(grid.node_shape)
    for color in itertools.product((0, 1), repeat=grid.dim):
        yield np.all([idx[a] % 2 == color[a] for a in range(grid.dim)], axis=0)


class _LocalMoves:
    """Exact change of J_p when the value at one node is replaced.

    For a node ``i`` and a cell with lower-left corner ``i - o``, the cell
    gradient is affine in the node value with slope ``w_o``: ``-1/h`` in every
    component when ``o = 0``, ``e_a/h`` when ``o = e_a``, and zero otherwise.
    """

    def __init__(self, vals: np.ndarray, nodes: np.ndarray, h: float, p: float):
        self.p, self.h = p, h
        dim = nodes.shape[1]
        self.dv = h**dim
        self.t0 = vals[tuple(nodes.T)]
        self.g0, self.w, self.others_pos = [], [], []
        for o in itertools.product((0, 1), repeat=dim):
            o = np.array(o)
            k = nodes - o
            g = np.stack([(vals[tuple((k + e).T)] - vals[tuple(k.T)]) / h
                          for e in np.eye(dim, dtype=int)], axis=-1)
            if not o.any():
                w = np.full(dim, -1.0 / h)
            elif o.sum() == 1:
                w = o / h
            else:
                w = np.zeros(dim)
            corners = [vals[tuple((k + np.array(c)).T)]
                       for c in itertools.product((0, 1), repeat=dim) if tuple(c) != tuple(o)]
            self.g0.append(g)
            self.w.append(w)
            self.others_pos.append(np.all(np.array(corners) > 0, axis=0))
        nbr = [vals[tuple((nodes + s * e).T)] for e in np.eye(dim, dtype=int) for s in (-1, 1)]
        self.t_hi = np.max(nbr, axis=0)

    def dirichlet(self, t):
        total = 0.0
        for g0, w in zip(self.g0, self.w):
            g = g0 + (t - self.t0)[:, None] * w
            total = total + np.sum(g**2, axis=1) ** (self.p / 2)
        return total * self.dv

    def volume(self, t):
        return sum((t > 0) & pos for pos in self.others_pos) * self.dv

    def energy(self, t):
        return self.dirichlet(t) + self.volume(t)

    def best_positive(self, iters: int = 48):
        """argmin over ``t in [0, max neighbor]`` of the local Dirichlet energy."""
        lo = np.zeros_like(self.t0)
        hi = self.t_hi.copy()
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            up = self._slope(mid) > 0
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
        return 0.5 * (lo + hi)

    def _slope(self, t):
        d = 0.0
        for g0, w in zip(self.g0, self.w):
            g = g0 + (t - self.t0)[:, None] * w
            n2 = np.sum(g**2, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(n2 > 0, n2 ** ((self.p - 2) / 2), 0.0)
            d = d + fac * (g @ w)
        return d


def _flip_sweep(vals: np.ndarray, free: np.ndarray, grid: Grid, p: float,
                threshold: float, extra=None) -> int:
    """One pass of single-node flips over all colors, in place; returns count.

    ``extra(nodes, t_old, t_new, vals)`` may add further energy changes (used
    for the nonlocal term).
    """
    flips = 0
    for color in _color_masks(grid):
        nodes = np.argwhere(free & color)
        if nodes.size == 0:
            continue
        moves = _LocalMoves(vals, nodes, grid.h, p)
        t0 = moves.t0
        t_new = np.zeros_like(t0)
        raise_ = (t0 <= 0) & (moves.t_hi > 0)
        if raise_.any():
            t_new[raise_] = _LocalMoves(vals, nodes[raise_], grid.h, p).best_positive()
        cand = (t0 > 0) | (t_new > 0)
        if not cand.any():
            continue
        gain = (moves.energy(t0) - moves.energy(t_new))[cand]
        nodes, t0, t_new = nodes[cand], t0[cand], t_new[cand]
        if extra is not None:
            gain = gain - extra(nodes, t0, t_new, vals)
        take = gain > threshold
        if take.any():
            vals[tuple(nodes[take].T)] = t_new[take]
            flips += int(take.sum())
    return flips


def _check_boundary(u: ScalarField, ball: Ball, free: np.ndarray):
    m = u.grid.node_shape[0]
    touched = np.zeros(u.grid.node_shape, dtype=bool)
    cells = ball.cell_mask(u.grid)
    for off in itertools.product((0, 1), repeat=u.grid.dim):
        touched[tuple(slice(o, m - 1 + o) for o in off)] |= cells
    if np.any(u.values[touched & ~free] < 0):
        raise NegativeBoundary("boundary values must be nonnegative")


def _total(vals, grid, ball, p) -> float:
    return eval_Jp(ScalarField(grid, vals), ball, p).total


def _node_gradient_max(vals: np.ndarray, grid: Grid) -> np.ndarray:
    """Largest cell gradient norm among the cells having each node as a corner."""
    gn = discrete_gradient(ScalarField(grid, vals)).norm()
    out = np.zeros(grid.node_shape)
    m = out.shape[0]
    for off in itertools.product((0, 1), repeat=grid.dim):
        sl = tuple(slice(o, m - 1 + o) for o in off)
        out[sl] = np.maximum(out[sl], gn)
    return out


def _neighbor_any(mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mask)
    for a in range(mask.ndim):
        out |= np.roll(mask, 1, axis=a) | np.roll(mask, -1, axis=a)
    return out


class _Engine:
    """Energy and relaxation on a fixed positivity set, shared by the solvers."""

    def __init__(self, grid, ball, p, tol, delta, free):
        self.grid, self.ball, self.p, self.tol = grid, ball, p, tol
        self.delta, self.free = delta, free
        self.cells = ball.cell_mask(grid)
        self.extra_flip = None

    def energy(self, vals) -> float:
        return _total(vals, self.grid, self.ball, self.p)

    def threshold(self, J) -> float:
        return self.tol * max(abs(J), self.grid.cell_volume)

    def problem(self, vals):
        active = self.free & (vals > 0)
        fixed = np.where(self.free & ~active, 0.0, vals)
        return DirichletProblem(self.grid, fixed, active, self.p, self.delta,
                                cell_weights=self.cells)

    def relax(self, vals) -> np.ndarray:
        prob = self.problem(vals)
        x, _, _ = descend(prob, vals.ravel()[prob.free_idx], self.tol, 200)
        return np.maximum(prob.full(x), 0.0)


def _interface_moves(engine: _Engine, vals: np.ndarray, J: float):
    """Batch moves of the discrete free boundary, accepted only after relaxation.

    Nodes next to the interface are proposed for deactivation where
    ``(p-1)|grad u|^p < 1`` and for activation where it exceeds 1 (the
    stationarity condition of J_p at a free boundary).  The batch is halved,
    keeping the strongest proposals, until the relaxed energy decreases.
    """
    p, free = engine.p, engine.free
    G = (p - 1) * _node_gradient_max(vals, engine.grid) ** p
    pos = vals > 0
    deact = free & pos & _neighbor_any(~pos) & (G < 1)
    act = free & ~pos & _neighbor_any(pos) & (G > 1)
    nodes = np.argwhere(deact | act)
    if nodes.size == 0:
        return vals, 0, J
    score = np.abs(G[tuple(nodes.T)] - 1)
    nodes = nodes[np.argsort(-score, kind="stable")]
    t_act = np.zeros(len(nodes))
    is_act = act[tuple(nodes.T)]
    if is_act.any():
        t_act[is_act] = _LocalMoves(vals, nodes[is_act], engine.grid.h, p).best_positive()
    k = len(nodes)
    for _ in range(_MAX_HALVINGS):
        trial = vals.copy()
        trial[tuple(nodes[:k].T)] = np.where(is_act[:k], t_act[:k], 0.0)
        trial = engine.relax(trial)
        Jt = engine.energy(trial)
        if Jt < J - engine.threshold(J):
            return trial, k, Jt
        if k == 1:
            break
        k = max(k // 2, 1)
    return vals, 0, J


def _active_set_loop(engine: _Engine, vals: np.ndarray, max_outer: int,
                     flip_tol: float | None = None):
    J = engine.energy(vals)
    trace = [J]
    changes = 0
    try_moves = True
    for outer in range(1, max_outer + 1):
        relaxed = engine.relax(vals)
        J_relax = engine.energy(relaxed)
        if J_relax <= J:
            vals, J_relax = relaxed, J_relax
        else:
            J_relax = J
        moved, J_move = 0, J_relax
        if try_moves:
            vals, moved, J_move = _interface_moves(engine, vals, J_relax)
        thresh = flip_tol if flip_tol is not None else engine.threshold(J_move)
        flips = _flip_sweep(vals, engine.free, engine.grid, engine.p, thresh,
                            extra=engine.extra_flip)
        J_new = engine.energy(vals)
        changes += moved + flips
        trace.extend([J_relax, J_move, J_new])
        settled = flips == 0 and (J - J_new) <= engine.threshold(J)
        done = settled and try_moves and moved == 0
        # after a failed batch, let single flips finish before batching again
        try_moves = moved > 0 or settled
        J = J_new
        if done:
            return vals, outer, J, changes, trace
    raise NonConvergence(f"active-set loop did not settle in {max_outer} iterations")


def minimize_Jp(boundary: ScalarField, ball: Ball, p: float, tol: float = 1e-10,
                initial: ScalarField | None = None, max_outer: int = 500,
                delta_reg: float | None = None, multilevel: bool = True,
                flip_tol: float | None = None) -> MinimizeReport:
    """Discrete minimizer of J_p in ``ball`` with the values of ``boundary`` outside.

    ``flip_tol`` (absolute, default ``tol * max(J, h^dim)``) is the smallest
    energy gain for which a single-node flip is applied.  Without an
    ``initial`` guess the problem is first solved on coarser grids.
    """
    p = check_exponent(p)
    grid = boundary.grid
    free = ball.free_mask(grid)
    _check_boundary(boundary, ball, free)
    if delta_reg is None:
        delta_reg = 1e-8 * data_scale(boundary, ball)
    if initial is None and multilevel and grid.extent % 2 == 0 and grid.extent >= 2 * _COARSEST:
        coarse = ScalarField(grid.coarsen(), boundary.values[(slice(None, None, 2),) * grid.dim])
        sub = minimize_Jp(coarse, ball, p, tol, max_outer=max_outer, delta_reg=delta_reg)
        initial = prolong(sub.u, grid)
    else:
        sub = None
    vals = np.array(boundary.values, dtype=float)
    start = boundary if initial is None else initial
    vals[free] = np.maximum(start.values[free], 0.0)
    engine = _Engine(grid, ball, p, tol, delta_reg, free)
    vals, outer, J, changes, trace = _active_set_loop(engine, vals, max_outer, flip_tol)
    return MinimizeReport(ScalarField(grid, vals), outer, J, changes, trace, sub)


# --- 1D diagnostics -----------------------------------------------------------

def positivity_slope_1d(u: ScalarField) -> tuple[float, float]:
    """Slope of ``u`` on its rightmost positivity interval, and the free boundary.

    The free boundary is the last zero node to the left of that interval.
    """
    if u.grid.dim != 1:
        raise ValueError("1D fields only")
    x = u.grid.axis()
    v = u.values
    pos = np.flatnonzero(v > 0)
    if pos.size == 0:
        return 0.0, float("nan")
    right = pos[-1]
    left = right
    while left > 0 and v[left - 1] > 0:
        left -= 1
    fb = x[left - 1] if left > 0 else x[0]
    seg = slice(max(left - 1, 0), right + 1)
    slope = np.polyfit(x[seg], v[seg], 1)[0]
    return float(slope), float(fb)


# --- nonlocal almost minimizer -----------------------------------------------

PHI_SHAPES = ("zero", "clamp", "smoothstep")


@dataclass(frozen=True)
class PhiSpec:
    """``Phi: R -> [0, 1]`` vanishing on ``(-inf, 0]``.

    ``clamp``: ``min(max(t, 0), 1)``; ``smoothstep``: ``3s^2 - 2s^3`` with
    ``s = clamp(t / width)``; ``zero``: identically zero.
    """

    shape: str = "clamp"
    width: float = 1.0

    def __post_init__(self):
        if self.shape not in PHI_SHAPES:
            raise ValueError(f"unknown Phi shape {self.shape!r}")
        if not self.width > 0:
            raise ValueError("width must be positive")

    @property
    def is_zero(self) -> bool:
        return self.shape == "zero"

    def __call__(self, t):
        s = np.clip(np.asarray(t, dtype=float) / self.width, 0.0, 1.0)
        if self.shape == "zero":
            return np.zeros_like(s)
        if self.shape == "clamp":
            return s
        return s * s * (3 - 2 * s)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        s = t / self.width
        inside = (s > 0) & (s < 1)
        if self.shape == "zero":
            return np.zeros_like(t)
        if self.shape == "clamp":
            return inside / self.width
        return np.where(inside, 6 * s * (1 - s) / self.width, 0.0)


class NonlocalTerm:
    """``sum_{c,c'} Phi(U_c) Phi(U_c') Phi(U_c - U_c') h^(2 dim)`` over ball cells,
    with ``U`` the cell (corner average) values."""

    def __init__(self, grid: Grid, ball: Ball, phi: PhiSpec, chunk: int = 2048):
        self.grid, self.phi, self.chunk = grid, phi, chunk
        self.mask = ball.cell_mask(grid)
        self.w = grid.cell_volume**2

    def _cells(self, vals):
        return ScalarField(self.grid, vals).cell_values()[self.mask]

    def value(self, vals) -> float:
        U = self._cells(vals)
        a = self.phi(U)
        total = 0.0
        for s in range(0, U.size, self.chunk):
            blk = slice(s, s + self.chunk)
            total += float(a[blk] @ (self.phi(U[blk, None] - U[None, :]) @ a))
        return total * self.w

    def gradient(self, vals) -> np.ndarray:
        """Derivative with respect to every nodal value."""
        U = self._cells(vals)
        a, da = self.phi(U), self.phi.derivative(U)
        dU = np.zeros_like(U)
        for s in range(0, U.size, self.chunk):
            blk = slice(s, s + self.chunk)
            D = U[blk, None] - U[None, :]
            sym = self.phi(D) + self.phi(-D)
            dsym = self.phi.derivative(D) - self.phi.derivative(-D)
            dU[blk] = da[blk] * (sym @ a) + a[blk] * (dsym @ a)
        dU *= self.w
        cell_grad = np.zeros(self.grid.cell_shape)
        cell_grad[self.mask] = dU / 2**self.grid.dim
        out = np.zeros(self.grid.node_shape)
        m = out.shape[0]
        for off in itertools.product((0, 1), repeat=self.grid.dim):
            out[tuple(slice(o, m - 1 + o) for o in off)] += cell_grad
        return out

    def flip_delta(self, nodes, t_old, t_new, vals) -> np.ndarray:
        """Change of the term when each node alone moves from ``t_old`` to ``t_new``."""
        grid = self.grid
        dim = grid.dim
        cellvals = ScalarField(grid, vals).cell_values()
        idx_map = -np.ones(grid.cell_shape, dtype=int)
        idx_map[self.mask] = np.arange(self.mask.sum())
        U = cellvals[self.mask]
        a = self.phi(U)
        offs = [np.array(o) for o in itertools.product((0, 1), repeat=dim)]
        # cells touched by each node, their old/new values
        cid = np.stack([idx_map[tuple((nodes - o).T)] for o in offs], axis=1)
        shift = ((t_new - t_old) / 2**dim)[:, None]
        old = U[cid]
        new = old + shift
        out = np.zeros(len(nodes))
        inside = np.zeros((len(nodes), U.size), dtype=bool)
        np.put_along_axis(inside, cid, True, axis=1)

        def sym(x, y):
            return self.phi(x) * self.phi(y) * (self.phi(x - y) + self.phi(y - x))

        for j in range(len(offs)):
            outside_pairs = sym(new[:, j, None], U[None, :]) - sym(old[:, j, None], U[None, :])
            out += np.sum(np.where(inside, 0.0, outside_pairs), axis=1)
            for k in range(j + 1, len(offs)):
                out += sym(new[:, j], new[:, k]) - sym(old[:, j], old[:, k])
        del a
        return out * self.w


def make_nonlocal_almost_minimizer(boundary: ScalarField, ball: Ball, p: float,
                                   phi: PhiSpec = PhiSpec(), tol: float = 1e-10,
                                   max_outer: int = 100
                                   ) -> tuple[ScalarField, AlmostMinParams, dict]:
    """Minimize ``J_p + nonlocal term`` and return the field with ``(|B_1|, dim)``.

    Starts from the J_p minimizer; with ``Phi = 0`` that minimizer is returned
    unchanged.  The third value carries diagnostics (energies, iterations).
    """
    p = check_exponent(p)
    grid = boundary.grid
    params = AlmostMinParams(kappa=Ball.unit(grid.dim).volume, beta=float(grid.dim))
    base = minimize_Jp(boundary, ball, p, tol)
    if phi.is_zero:
        return base.u, params, {"outer_iterations": 0, "energy": base.final_energy,
                                "nonlocal": 0.0, "flips": 0}
    term = NonlocalTerm(grid, ball, phi)
    engine = _NonlocalEngine(grid, ball, p, tol, 1e-8 * data_scale(boundary, ball),
                             ball.free_mask(grid), term)
    vals, outer, J, changes, _ = _active_set_loop(engine, np.array(base.u.values), max_outer)
    return ScalarField(grid, vals), params, {
        "outer_iterations": outer, "energy": J, "nonlocal": term.value(vals),
        "flips": changes}


class _NonlocalEngine(_Engine):
    def __init__(self, grid, ball, p, tol, delta, free, term: NonlocalTerm):
        super().__init__(grid, ball, p, tol, delta, free)
        self.term = term
        self.extra_flip = term.flip_delta

    def energy(self, vals) -> float:
        return super().energy(vals) + self.term.value(vals)

    def relax(self, vals) -> np.ndarray:
        prob = self.problem(vals)
        if prob.n == 0:
            return vals

        def fun(x):
            full = prob.full(x)
            e = prob.energy(x) + self.term.value(full)
            g = prob.gradient(x) + self.term.gradient(full).ravel()[prob.free_idx]
            return e, g

        res = sp_minimize(fun, vals.ravel()[prob.free_idx], jac=True, method="L-BFGS-B",
                          bounds=[(0, None)] * prob.n,
                          options={"ftol": self.tol, "gtol": 1e-12, "maxiter": 5000})
        return np.maximum(prob.full(res.x), 0.0)


# --- almost-minimality check -------------------------------------------------

@dataclass(frozen=True)
class BallCheck:
    index: int
    center: tuple
    radius: float
    J_u: float
    J_v: float
    ratio: float
    allowed: float

    @property
    def passed(self) -> bool:
        return self.ratio <= self.allowed

    @property
    def margin(self) -> float:
        return self.ratio - self.allowed


@dataclass
class AlmostMinReport:
    rows: list
    slack: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def worst(self) -> BallCheck | None:
        return max(self.rows, key=lambda r: r.margin) if self.rows else None

    @property
    def worst_ratio(self) -> float:
        return max((r.ratio for r in self.rows), default=float("nan"))


def sample_balls(grid: Grid, n_balls: int, seed: int, domain: Ball | None = None,
                 min_radius_cells: float = 4.0) -> list[Ball]:
    """Centers uniform in the domain ball at distance > ``4h`` from its edge,
    radii log-uniform between ``4h`` and that distance."""
    domain = domain or Ball.unit(grid.dim)
    rng = np.random.default_rng(seed)
    rmin = min_radius_cells * grid.h
    c0 = np.asarray(domain.center)
    reach = domain.radius - rmin
    if reach <= 0:
        raise ValueError("domain too small for the minimum radius")
    balls = []
    while len(balls) < n_balls:
        c = c0 + rng.uniform(-reach, reach, size=grid.dim)
        dist = domain.radius - np.linalg.norm(c - c0)
        if dist <= rmin:
            continue
        r = float(np.exp(rng.uniform(np.log(rmin), np.log(dist))))
        balls.append(Ball(tuple(c), r * (1 - 1e-9)))
    return balls


def verify_almost_min(u: ScalarField, params: AlmostMinParams, p: float, n_balls: int = 50,
                      seed: int = 0, domain: Ball | None = None, slack_coeff: float = 10.0,
                      balls: list[Ball] | None = None, tol: float = 1e-10) -> AlmostMinReport:
    """Compare ``J_p(u, B)`` with a computed competitor on sampled balls.

    The competitor is ``minimize_Jp`` started from ``u`` itself, so a pass is
    evidence of almost minimality, not proof.
    """
    p = check_exponent(p)
    if np.any(u.values < 0):
        raise NegativeBoundary("u must be nonnegative")
    slack = slack_coeff * u.grid.h
    if balls is None:
        balls = sample_balls(u.grid, n_balls, seed, domain)
    rows = []
    for i, B in enumerate(balls):
        J_u = eval_Jp(u, B, p).total
        comp = minimize_Jp(u, B, p, tol, initial=u, multilevel=False)
        J_v = min(comp.final_energy, J_u)
        if J_v > 0:
            ratio = J_u / J_v
        else:
            ratio = 1.0 if J_u == 0 else float("inf")
        rows.append(BallCheck(i, B.center, B.radius, J_u, J_v, ratio,
                              1 + params.sigma(B.radius) + slack))
    return AlmostMinReport(rows, slack)


def bump_counterexample(u: ScalarField, ball: Ball, p: float, target_ratio: float = 1.5,
                        tol: float = 1e-10) -> tuple[ScalarField, float]:
    """Add ``t * (1 - |x - c|^2 / r^2)^+ `` and tune ``t`` by bisection so that
    ``J_p(u + bump, B) / J_p(competitor, B)`` equals ``target_ratio``."""
    x = u.grid.node_coords()
    c = np.asarray(ball.center)
    shape = np.maximum(1 - np.sum((x - c) ** 2, axis=-1) / ball.radius**2, 0.0)
    shape[~ball.free_mask(u.grid)] = 0.0
    J_ref = minimize_Jp(u, ball, p, tol, initial=u, multilevel=False).final_energy

    def ratio(t):
        return eval_Jp(u + t * shape, ball, p).total / J_ref

    lo, hi = 0.0, 1.0
    while ratio(hi) < target_ratio:
        hi *= 2
        if hi > 1e6:
            raise ValueError("could not reach the target ratio")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ratio(mid) < target_ratio else (lo, mid)
    t = 0.5 * (lo + hi)
    return u + t * shape, t
