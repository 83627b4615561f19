"""Named boundary-data profiles, ``name:key=value,key=value``.

Every profile is a function on the whole grid; solvers only read the values
outside the free region, so the interior part doubles as an initial guess.
"""
from __future__ import annotations

import numpy as np

from .grid import Grid, ScalarField


class UnknownProfile(ValueError):
    pass


def _direction(dim: int, theta: float) -> np.ndarray:
    return np.array([1.0]) if dim == 1 else np.array([np.cos(theta), np.sin(theta)])


def affine(grid: Grid, A=0.5, b=0.0, theta=0.0, clip=1) -> ScalarField:
    """``(b + A e.x)^+`` with ``e`` the unit vector at angle ``theta``."""
    x = grid.node_coords()
    vals = b + A * (x @ _direction(grid.dim, theta))
    return ScalarField(grid, np.maximum(vals, 0.0) if clip else vals)


def cone(grid: Grid, A=1.0, x0=0.0, y0=0.0, b=0.0) -> ScalarField:
    """``A |x - x0| + b``."""
    c = np.array([x0, y0][: grid.dim])
    r = np.linalg.norm(grid.node_coords() - c, axis=-1)
    return ScalarField(grid, np.maximum(A * r + b, 0.0))


def bump(grid: Grid, A=1.0, width=0.5, b=0.0) -> ScalarField:
    """Gaussian ``b + A exp(-|x|^2 / width^2)``."""
    r2 = np.sum(grid.node_coords() ** 2, axis=-1)
    return ScalarField(grid, b + A * np.exp(-r2 / width**2))


def fourier(grid: Grid, seed=0, modes=4, amp=0.3, A=1.0, b=1.0, theta=None,
            clip=0) -> ScalarField:
    """``b + A e.x + amp * sum_k c_k trig(pi k.x) / |k|^2`` over integer ``k``.

    The slope direction is drawn from the seed unless ``theta`` is given.
    """
    rng = np.random.default_rng(int(seed))
    modes = int(modes)
    if theta is None:
        theta = rng.uniform(0, 2 * np.pi)
    x = grid.node_coords()
    vals = b + A * (x @ _direction(grid.dim, theta))
    rng_k = range(-modes, modes + 1)
    ks = [np.array(k) for k in np.ndindex(*(len(rng_k),) * grid.dim)]
    for k in ks:
        k = k - modes
        if not k.any():
            continue
        phase = np.pi * (x @ k)
        c, s = rng.normal(size=2)
        vals = vals + amp * (c * np.cos(phase) + s * np.sin(phase)) / float(k @ k)
    return ScalarField(grid, np.maximum(vals, 0.0) if clip else vals)


def harmonic_poly(grid: Grid, b=0.0) -> ScalarField:
    """``x1^2 - x2^2`` in 2D and ``x`` in 1D, plus ``b``; harmonic either way."""
    x = grid.node_coords()
    if grid.dim == 1:
        return ScalarField(grid, x[..., 0] + b)
    return ScalarField(grid, x[..., 0] ** 2 - x[..., 1] ** 2 + b)


PROFILES = {
    "affine": affine,
    "cone": cone,
    "bump": bump,
    "fourier": fourier,
    "harmonic-poly": harmonic_poly,
}


def parse_profile(spec: str) -> tuple[str, dict]:
    """Split ``"affine:A=0.5,theta=1"`` into name and float parameters."""
    name, _, rest = spec.partition(":")
    name = name.strip()
    if name not in PROFILES:
        raise UnknownProfile(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise UnknownProfile(f"profile parameter {item!r} is not key=value")
        params[key.strip()] = float(val)
    return name, params


def make_profile(grid: Grid, spec: str) -> ScalarField:
    name, params = parse_profile(spec)
    try:
        return PROFILES[name](grid, **params)
    except TypeError as exc:
        raise UnknownProfile(str(exc)) from None
