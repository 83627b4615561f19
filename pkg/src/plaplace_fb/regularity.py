"""Quantitative checks of the regularity theory on discrete fields.

Constants that enter hypotheses (``C_bar``, ``C0``, ``gamma_hat`` ...) are
inputs; constants that appear in conclusions are measured and reported.
Pass/fail decisions only use the exactly known structure: decay factors
``rho^alpha``, the branch thresholds ``a/2`` and ``eps a``, the explicit
ellipticity bounds and the explicit ``(M, sigma0)`` formulas.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .energy import check_exponent, zero_set_measure
from .grid import (Ball, ScalarField, VectorField, ball_average, discrete_gradient,
                   rescale)
from .pharmonic import HypothesisViolated, affine_fit_slope, p_harmonic_replacement


class DenominatorNonpositive(ValueError):
    def __init__(self, gap: float):
        super().__init__(f"eta infeasible: denominator is {gap:.6g} <= 0")
        self.gap = gap


class ExponentOutOfRange(ValueError):
    pass


class OriginNotInZeroSet(ValueError):
    pass


class ResolutionFloor(UserWarning):
    """The requested number of dyadic steps was cut at the grid resolution."""


def slack(h: float, coeff: float = 10.0) -> float:
    return coeff * h


def _integral(mag: np.ndarray, mask: np.ndarray, p: float, dv: float) -> float:
    return float(np.sum(mag[mask] ** p) * dv)


# --- energy comparison -------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    lhs: float
    rhs: float
    constant: float
    grad_u_p: float  # int_B |grad u|^p
    grad_v_p: float
    passed: bool
    residual: float  # solver weak-form defect of the replacement


def comparison_constant(p: float, gamma_hat: float) -> float:
    """Constant of the energy comparison in terms of the monotonicity constant.

    ``1/gamma`` for ``p >= 2``; ``(p gamma 2^(p-3))^(-p/2)`` for ``p < 2``.
    """
    p = check_exponent(p)
    if not gamma_hat > 0:
        raise ValueError("gamma_hat must be positive")
    if p >= 2:
        return 1.0 / gamma_hat
    return (p * gamma_hat * 2 ** (p - 3)) ** (-p / 2)


def check_energy_comparison(u: ScalarField, ball: Ball, p: float, gamma_hat: float,
                            slack_coeff: float = 10.0, tol: float = 1e-10,
                            replacement=None) -> ComparisonReport:
    """``int |grad u - grad v|^p`` against the branch-appropriate bound.

    ``v`` is the p-harmonic replacement of ``u`` in ``ball`` (computed unless
    passed in as a :class:`ReplacementResult`).
    """
    p = check_exponent(p)
    res = replacement or p_harmonic_replacement(u, ball, p, tol=tol)
    gu, gv = discrete_gradient(u), discrete_gradient(res.v)
    mask = ball.cell_mask(u.grid)
    dv = u.grid.cell_volume
    nu, nv = gu.norm(), gv.norm()
    Iu, Iv = _integral(nu, mask, p, dv), _integral(nv, mask, p, dv)
    lhs = _integral((gu - gv).norm(), mask, p, dv)
    C = comparison_constant(p, gamma_hat)
    gap = max(Iu - Iv, 0.0)
    if p >= 2:
        rhs = C * gap
    else:
        rhs = C * gap ** (p / 2) * _integral(nu + nv, mask, p, dv) ** (1 - p / 2)
    # the gap is a difference of two O(Iu) numbers, known only to rounding at that scale
    floor = 8 * np.finfo(float).eps * max(Iu, Iv)
    passed = lhs <= rhs * (1 + slack(u.grid.h, slack_coeff)) + floor
    return ComparisonReport(lhs, rhs, C, Iu, Iv, passed, res.residual)


def pythagoras_defect(u: ScalarField, ball: Ball, tol: float = 1e-12) -> tuple[float, float]:
    """For p = 2: ``|int|grad(u-v)|^2 - int(|grad u|^2 - |grad v|^2)|`` and ``int|grad u|^2``."""
    res = p_harmonic_replacement(u, ball, 2.0, tol=tol)
    gu, gv = discrete_gradient(u), discrete_gradient(res.v)
    mask = ball.cell_mask(u.grid)
    dv = u.grid.cell_volume
    Iu = _integral(gu.norm(), mask, 2, dv)
    diff = _integral((gu - gv).norm(), mask, 2, dv)
    return abs(diff - (Iu - _integral(gv.norm(), mask, 2, dv))), Iu


# --- dichotomy -------------------------------------------------------------

@dataclass(frozen=True)
class FlatnessState:
    """Slope ``q``, gradient average ``a`` and flatness ``eps`` (relative to ``a``);
    ``b`` is the offset of the affine approximation ``b + q.x`` when known."""

    q: tuple
    a: float
    eps: float
    b: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(x) for x in np.atleast_1d(self.q)))
        if self.a < 0 or self.eps < 0:
            raise ValueError("a and eps must be nonnegative")

    @property
    def slope(self) -> np.ndarray:
        return np.array(self.q)


@dataclass(frozen=True)
class DichotomyOutcome:
    tag: str  # "Decay", "Flat", "NotApplicable" or "RawFailure"
    a: float
    a_eta: float | None = None
    q: tuple | None = None
    flatness: float | None = None  # (avg over B_eta of |grad u - q|^p)^(1/p), absolute
    state: FlatnessState | None = None


def dichotomy_experiment(u: ScalarField, p: float, eps: float, eta: float, M: float,
                         C_bar: float = 2.0, tol: float = 1e-10) -> DichotomyOutcome:
    """Evaluate both branch conditions on ``u`` posed on ``B_1``."""
    p = check_exponent(p)
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not 0 < eta <= 0.5:
        raise ValueError("eta must lie in (0, 1/2]")
    dim = u.grid.dim
    B1 = Ball.unit(dim)
    g = discrete_gradient(u)
    a = ball_average(g, B1, p)
    if a < M or a == 0:
        return DichotomyOutcome("NotApplicable", a)
    v = p_harmonic_replacement(u, B1, p, tol=tol).v
    q = affine_fit_slope(v)
    Beta = B1.scaled(eta)
    a_eta = ball_average(g, Beta, p)
    flat = ball_average(g - VectorField.constant(u.grid, q), Beta, p)
    qt = tuple(float(x) for x in q)
    if a_eta <= a / 2:
        return DichotomyOutcome("Decay", a, a_eta, qt, flat)
    qn = float(np.linalg.norm(q))
    if flat <= eps * a and a / 4 < qn <= C_bar * a:
        state = FlatnessState(q, a, flat / a)
        return DichotomyOutcome("Flat", a, a_eta, qt, flat, state)
    return DichotomyOutcome("RawFailure", a, a_eta, qt, flat)


# --- improvement of flatness ---------------------------------------------------

def zero_set_exponent(p: float, n: int) -> float | None:
    """Exponent of the zero-set smallness; ``None`` when ``p > n`` (empty zero set)."""
    if p < n:
        return p * p / (n - p)
    if p == n:
        return n / (n - 1) if n > 1 else None
    return None


@dataclass(frozen=True)
class ImprovementResult:
    rho: float
    state: FlatnessState
    zero_measure: float
    q_tilde: tuple
    q_bar: tuple
    C_tilde: float  # |q_tilde - q| / (eps a)
    c1: float  # min over B_{9/10} of b + q.x, divided by a
    zero_exponent: float | None


def improvement_step(u: ScalarField, state: FlatnessState, p: float, rho: float = 0.5,
                     C0: float = 2.0, inner: float = 0.9, tol: float = 1e-10
                     ) -> ImprovementResult:
    """One improvement-of-flatness step at unit scale.

    The replacement is taken in ``B_inner`` (default ``B_{9/10}``), the new
    slope is its gradient at the origin and the new flatness is measured on
    ``B_rho`` relative to ``state.a``.
    """
    p = check_exponent(p)
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    q = state.slope
    a = state.a
    qn = float(np.linalg.norm(q))
    if not (a / 8 < qn <= 2 * C0 * a):
        raise HypothesisViolated(f"need a/8 < |q| <= 2 C0 a; got |q|={qn:.6g}, a={a:.6g}")
    dim = u.grid.dim
    B1 = Ball.unit(dim)
    Bin = B1.scaled(inner)
    v = p_harmonic_replacement(u, Bin, p, tol=tol).v
    qt = affine_fit_slope(v)
    g = discrete_gradient(u)
    flat = ball_average(g - VectorField.constant(u.grid, qt), B1.scaled(rho), p) / a
    b = state.b
    if b is None:
        b = float(np.mean(u.values[B1.node_mask(u.grid)]))
    nodes = u.grid.node_coords()[Bin.node_mask(u.grid)]
    c1 = float(np.min(b + nodes @ q)) / a if a > 0 else float("nan")
    denom = state.eps * a
    C_tilde = float(np.linalg.norm(qt - q)) / denom if denom > 0 else 0.0
    return ImprovementResult(
        rho, FlatnessState(qt, a, flat, b), zero_set_measure(u, Bin),
        tuple(float(x) for x in qt), tuple(float(x) for x in qt - q), C_tilde, c1,
        zero_set_exponent(p, dim))


def default_alpha(alpha0: float, beta: float, p: float) -> float:
    """``min(alpha0 / 2, beta / max(p, 2))``."""
    return min(alpha0 / 2, beta / max(p, 2.0))


@dataclass
class DecayTrace:
    rho: float
    alpha: float
    eps: float
    a: float
    rows: list = field(default_factory=list)  # (k, a_k, q_k, flat_k)
    truncated: bool = False
    slack: float = 0.0

    @property
    def increments(self) -> list[float]:
        qs = [np.array(r[2]) for r in self.rows]
        return [float(np.linalg.norm(q1 - q0)) for q0, q1 in zip(qs, qs[1:])]

    @property
    def C_tilde(self) -> float:
        """Smallest C with ``|q_{k+1} - q_k| <= C rho^(k alpha) eps a`` for all k."""
        scale = self.eps * self.a
        if scale == 0:
            return 0.0
        return max((d / (self.rho ** (k * self.alpha) * scale)
                    for k, d in enumerate(self.increments)), default=0.0)

    @property
    def decay_ok(self) -> bool:
        return all(f <= self.rho ** (k * self.alpha) * self.eps * (1 + self.slack)
                   for k, _, _, f in self.rows)

    @property
    def increment_sum(self) -> float:
        return float(sum(self.increments))

    @property
    def increment_bound(self) -> float:
        return self.C_tilde * self.eps * self.a / (1 - self.rho**self.alpha)

    @property
    def passed(self) -> bool:
        return self.decay_ok and self.increment_sum <= self.increment_bound * (1 + self.slack)


def dyadic_decay_track(u: ScalarField, p: float, eps: float, rho: float, alpha: float,
                       K: int, q0=None, slack_coeff: float = 10.0, tol: float = 1e-10,
                       floor_cells: float = 8.0) -> DecayTrace:
    """Iterate the improvement step on the rescalings ``u(rho^k x) / rho^k``.

    ``q0`` defaults to the slope of the replacement in ``B_1`` at the origin.
    Row ``k`` holds ``a_k`` (the gradient average on ``B_{rho^k}``), the slope
    ``q_k`` and ``flat_k = (avg_{B_{rho^k}} |grad u - q_k|^p)^(1/p) / a``.  ``K``
    is truncated so that ``rho^K >= floor_cells * h``.
    """
    p = check_exponent(p)
    grid = u.grid
    B1 = Ball.unit(grid.dim)
    K_max = int(math.floor(math.log(floor_cells * grid.h) / math.log(rho) + 1e-9))
    truncated = K > K_max
    if truncated:
        warnings.warn(f"K={K} truncated to {K_max} at h={grid.h:g}", ResolutionFloor,
                      stacklevel=2)
        K = K_max
    g = discrete_gradient(u)
    a = ball_average(g, B1, p)
    if q0 is None:
        q0 = affine_fit_slope(p_harmonic_replacement(u, B1, p, tol=tol).v)
    q = np.atleast_1d(np.asarray(q0, dtype=float))
    trace = DecayTrace(rho, alpha, eps, a, truncated=truncated,
                       slack=slack(grid.h, slack_coeff))
    flat0 = ball_average(g - VectorField.constant(grid, q), B1, p) / a if a > 0 else 0.0
    trace.rows.append((0, a, tuple(float(x) for x in q), flat0))
    for k in range(K):
        r = rho**k
        uk = rescale(u, r)
        state = FlatnessState(q, a, trace.rows[-1][3])
        step = improvement_step(uk, state, p, rho=rho, C0=max(2.0, np.linalg.norm(q) / a),
                                tol=tol)
        q = np.array(step.q_tilde)
        a_next = ball_average(discrete_gradient(rescale(u, r * rho)), B1, p)
        trace.rows.append((k + 1, a_next, tuple(float(x) for x in q), step.state.eps))
    return trace


def estimate_alpha0(u: ScalarField, p: float, radii=None, tol: float = 1e-10) -> float:
    """Hoelder exponent of the replacement gradient, from the decay of its
    oscillation ``max |grad v - grad v(0)|`` over shrinking balls."""
    grid = u.grid
    B1 = Ball.unit(grid.dim)
    v = p_harmonic_replacement(u, B1, p, tol=tol).v
    g = discrete_gradient(v)
    q = affine_fit_slope(v)
    dev = (g - VectorField.constant(grid, q)).norm()
    if radii is None:
        radii = [0.5 * 2.0**-j for j in range(6) if 0.5 * 2.0**-j >= 8 * grid.h]
    osc = [float(dev[B1.scaled(r).cell_mask(grid)].max()) for r in radii]
    if len(radii) < 2 or min(osc) <= 0:
        return 1.0
    slope = np.polyfit(np.log(radii), np.log(osc), 1)[0]
    return float(np.clip(slope, 1e-3, 1.0))


# --- Campanato and Hoelder -----------------------------------------------------

@dataclass(frozen=True)
class CampanatoReport:
    lam: float
    seminorm: float
    seminorm_inf: float
    gamma: float
    holder_seminorm: float
    ratio: float
    by_radius: dict


def _holder_pairs(values: np.ndarray, centers: np.ndarray, mask: np.ndarray, h: float,
                  gamma: float) -> float:
    """Max of ``|g(x) - g(y)| / |x - y|^gamma`` over cell pairs offset by
    ``2^j`` cells along each axis (and along the diagonal in 2D)."""
    dim = mask.ndim
    n = mask.shape[0]
    best = 0.0
    steps = []
    s = 1
    while s < n:
        steps.append(s)
        s *= 2
    dirs = [tuple(int(a == b) for b in range(dim)) for a in range(dim)]
    if dim == 2:
        dirs += [(1, 1), (1, -1)]
    for d in dirs:
        for s in steps:
            off = [s * c for c in d]
            src = tuple(slice(max(0, -o), n - max(0, o)) for o in off)
            dst = tuple(slice(max(0, o), n - max(0, -o)) for o in off)
            ok = mask[src] & mask[dst]
            if not ok.any():
                continue
            dist = s * h * math.sqrt(sum(c * c for c in d))
            diff = np.abs(values[dst] - values[src])[ok]
            best = max(best, float(diff.max()) / dist**gamma)
    return best


def campanato_seminorm(g: ScalarField, lam: float, radii=None, centers=None,
                       p: float = 2.0, domain: Ball | None = None) -> CampanatoReport:
    """Campanato seminorm of exponent ``lam`` against the Hoelder seminorm of
    exponent ``(lam - n) / p``, both on cell values inside ``domain``."""
    grid = g.grid
    n = grid.dim
    if not n < lam <= n + p:
        raise ExponentOutOfRange(f"need {n} < lambda <= {n + p}, got {lam}")
    domain = domain or Ball.unit(n)
    if radii is None:
        radii = [4 * grid.h * 2**j for j in range(32) if 4 * grid.h * 2**j <= 0.5 + 1e-12]
    radii = [float(r) for r in radii]
    if min(radii) < 4 * grid.h * (1 - 1e-12):
        raise ValueError("radii must be at least 4h")
    if centers is None:
        centers = [np.zeros(n)]
    vals = g.cell_values()
    pts = grid.cell_centers()
    in_dom = domain.cell_mask(grid)
    sup, sup_inf = 0.0, 0.0
    by_radius = {}
    for r in radii:
        best_r = 0.0
        for c in centers:
            m = in_dom & Ball(tuple(np.atleast_1d(c)), r).cell_mask(grid)
            if not m.any():
                continue
            x = vals[m]
            mean_osc = float(np.sum(np.abs(x - x.mean()) ** p) * grid.cell_volume)
            if p == 2:
                inf_osc = mean_osc
            else:
                res = minimize_scalar(
                    lambda t: np.sum(np.abs(x - t) ** p), bounds=(x.min(), x.max()),
                    method="bounded", options={"xatol": 1e-12 * (1 + np.abs(x).max())})
                inf_osc = min(float(res.fun) * grid.cell_volume, mean_osc)
            val = r ** (-lam) * mean_osc
            sup = max(sup, val)
            sup_inf = max(sup_inf, r ** (-lam) * inf_osc)
            best_r = max(best_r, val)
        by_radius[r] = best_r ** (1 / p)
    gamma = (lam - n) / p
    holder = _holder_pairs(vals, pts, in_dom, grid.h, gamma)
    semi = sup ** (1 / p)
    ratio = semi / holder if holder > 0 else (0.0 if semi == 0 else float("inf"))
    return CampanatoReport(lam, semi, sup_inf ** (1 / p), gamma, holder, ratio, by_radius)


# --- Lipschitz experiments ---------------------------------------------------

@dataclass(frozen=True)
class LipschitzReport:
    sup_grad_half: float
    lp_full: float
    realized_C: float


def lipschitz_experiment(u: ScalarField, p: float) -> LipschitzReport:
    """``sup_{B_1/2} |grad u|``, ``||grad u||_{L^p(B_1)}`` and the ratio ``sup / (lp + 1)``."""
    p = check_exponent(p)
    B1 = Ball.unit(u.grid.dim)
    gn = discrete_gradient(u).norm()
    half = B1.scaled(0.5).cell_mask(u.grid)
    sup = float(gn[half].max()) if half.any() else 0.0
    lp = _integral(gn, B1.cell_mask(u.grid), p, u.grid.cell_volume) ** (1 / p)
    return LipschitzReport(sup, lp, sup / (lp + 1))


def free_boundary_lipschitz_experiment(u: ScalarField, p: float, r0: float,
                                       tau: float = 0.0) -> float:
    """``sup_{B_r0} |grad u|`` for a field vanishing at the origin."""
    check_exponent(p)
    if u.at(np.zeros(u.grid.dim)) > tau:
        raise OriginNotInZeroSet("u(0) exceeds the positivity threshold")
    mask = Ball(tuple(np.zeros(u.grid.dim)), r0).cell_mask(u.grid)
    gn = discrete_gradient(u).norm()
    return float(gn[mask].max()) if mask.any() else 0.0


def shift_nodes(u: ScalarField, shift) -> ScalarField:
    """``w(x) = u(x + shift * h)`` for an integer node shift; values beyond the
    grid repeat the edge value."""
    shift = np.atleast_1d(shift).astype(int)
    idx = np.indices(u.grid.node_shape)
    m = u.grid.node_shape[0]
    src = tuple(np.clip(idx[a] + shift[a], 0, m - 1) for a in range(u.grid.dim))
    return ScalarField(u.grid, u.values[src])


# --- explicit constants of the dichotomy ---------------------------------------

def _denominator(p, eps, eta, C, C1, alpha):
    return eps**p - 2 ** (p - 1) * C * eta - 2 ** (p - 1) * C1 * eta ** (alpha * p)


def dichotomy_constants(p: float, n: int, eps: float, eta: float, C: float, C1: float,
                        alpha: float) -> tuple[float, float]:
    """``(M, sigma0)`` from the explicit formulas.

    ``M = (2^(p-1) C eta^-n / D)^e`` with ``D = eps^p - 2^(p-1) C eta -
    2^(p-1) C1 eta^(alpha p)`` and ``e = 1/p`` (p >= 2) or ``2/p^2`` (p < 2);
    ``sigma0 = eta^(n+1)`` or ``eta^((n+1) 2/p)``.
    """
    p = check_exponent(p)
    D = _denominator(p, eps, eta, C, C1, alpha)
    if not D > 0:
        raise DenominatorNonpositive(D)
    base = 2 ** (p - 1) * C * eta ** (-n) / D
    if p >= 2:
        return base ** (1 / p), eta ** (n + 1)
    return base ** (2 / p**2), eta ** ((n + 1) * 2 / p)


def dichotomy_chain(p: float, n: int, eps: float, eta: float, C: float, C1: float,
                    alpha: float, a: float, sigma: float) -> tuple[float, float]:
    """Both sides of the inequality chain that fixes ``(M, sigma0)``."""
    k = 2 ** (2 * (p - 1))
    if p >= 2:
        lhs = k * C * eta ** (-n) * sigma * a**p + k * C * eta ** (-n) \
            + k * C1 * a**p * eta ** (alpha * p)
    else:
        lhs = k * C * eta ** (-n) * sigma ** (p / 2) * a**p \
            + k * C * eta ** (-n) * a ** (p * (1 - p / 2)) \
            + k * C1 * a**p * eta ** (alpha * p)
    return lhs, 2 ** (p - 1) * eps**p * a**p


def feasible_eta_bound(p: float, eps: float, C: float, C1: float, alpha: float) -> float:
    """Largest ``eta`` in (0, 1) with a positive denominator (bisection)."""
    lo, hi = 0.0, 1.0
    if _denominator(p, eps, 1.0, C, C1, alpha) > 0:
        return 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if _denominator(p, eps, mid, C, C1, alpha) > 0 else (lo, mid)
    return lo
