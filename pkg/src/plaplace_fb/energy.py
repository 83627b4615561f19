"""The one-phase functional J_p and the flux monotonicity inequality."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Ball, ScalarField, discrete_gradient


class InvalidExponent(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


def check_exponent(p: float) -> float:
    p = float(p)
    if not p > 1:
        raise InvalidExponent(f"exponent p must exceed 1, got {p}")
    return p


@dataclass(frozen=True)
class PositivityRule:
    """A cell counts as positive iff all its corner values exceed ``tau``."""

    tau: float = 0.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")

    def active_cells(self, u: ScalarField) -> np.ndarray:
        return u.corner_min() > self.tau


@dataclass(frozen=True)
class EnergyBreakdown:
    dirichlet: float
    volume: float

    @property
    def total(self) -> float:
        return self.dirichlet + self.volume


def cell_energy(u: ScalarField, p: float, rule: PositivityRule = PositivityRule()) -> np.ndarray:
    """Per-cell ``(|grad u|^p + chi) h^dim``."""
    g = discrete_gradient(u).norm()
    return (g**p + rule.active_cells(u)) * u.grid.cell_volume


def eval_Jp(u: ScalarField, ball: Ball, p: float,
            rule: PositivityRule = PositivityRule()) -> EnergyBreakdown:
    p = check_exponent(p)
    mask = ball.cell_mask(u.grid)
    gnorm = discrete_gradient(u).norm()
    dv = u.grid.cell_volume
    dirichlet = float(np.sum(gnorm[mask] ** p) * dv)
    volume = float(np.sum(rule.active_cells(u)[mask]) * dv)
    return EnergyBreakdown(dirichlet, volume)


def zero_set_measure(u: ScalarField, ball: Ball,
                     rule: PositivityRule = PositivityRule()) -> float:
    mask = ball.cell_mask(u.grid)
    inactive = ~rule.active_cells(u)
    return float(np.sum(inactive[mask]) * u.grid.cell_volume)


def flux(z: np.ndarray, p: float) -> np.ndarray:
    """``|z|^(p-2) z`` along the last axis, with ``flux(0) = 0``."""
    z = np.asarray(z, dtype=float)
    n = np.sqrt(np.sum(z**2, axis=-1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n > 0, n ** (p - 2), 0.0)
    return scale * z


def monotonicity_gap(xi, zeta, p: float) -> tuple[float, float]:
    """Left side and (gamma = 1) right side of the flux monotonicity inequality.

    ``(F(xi) - F(zeta)) . (xi - zeta)`` against ``|xi-zeta|^2 (|xi|+|zeta|)^(p-2)``
    for ``p < 2`` and ``|xi-zeta|^p`` for ``p >= 2``.  Works elementwise on
    stacked vectors as well; then arrays are returned.
    """
    p = check_exponent(p)
    single = np.ndim(xi) <= 1 and np.ndim(zeta) <= 1
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    nx = np.sqrt(np.sum(xi**2, axis=-1))
    nz = np.sqrt(np.sum(zeta**2, axis=-1))
    if np.any(nx == 0) or np.any(nz == 0):
        raise DegenerateInput("xi and zeta must be nonzero")
    d = xi - zeta
    lhs = np.sum((flux(xi, p) - flux(zeta, p)) * d, axis=-1)
    dn = np.sqrt(np.sum(d**2, axis=-1))
    if p < 2:
        bound = dn**2 * (nx + nz) ** (p - 2)
    else:
        bound = dn**p
    if single:
        return float(lhs), float(bound)
    return lhs, bound


def sample_gamma(p: float, n_samples: int = 1_000_000, seed: int = 0,
                 dim: int = 2, chunk: int = 200_000) -> float:
    """Empirical monotonicity constant: min of lhs/bound over random pairs.

    Pairs are drawn with log-uniform magnitudes over two decades and uniform
    directions, so nearly antiparallel and very unequal pairs are both hit.
    """
    p = check_exponent(p)
    rng = np.random.default_rng(seed)
    best = np.inf
    left = n_samples
    while left > 0:
        m = min(chunk, left)
        left -= m
        dirs = rng.normal(size=(2, m, dim))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        mags = 10.0 ** rng.uniform(-1, 1, size=(2, m, 1))
        xi, zeta = dirs[0] * mags[0], dirs[1] * mags[1]
        lhs, bound = monotonicity_gap(xi, zeta, p)
        ok = bound > 1e-12 * np.maximum(mags[0, :, 0], mags[1, :, 0]) ** max(p, 2)
        if ok.any():
            best = min(best, float(np.min(lhs[ok] / bound[ok])))
    return best
