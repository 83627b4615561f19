import numpy as np
import pytest

from plaplace_fb.grid import Ball, Grid, ScalarField, VectorField, ball_average, discrete_gradient


@pytest.fixture
def grid2():
    return Grid.unit(2, "1/32")


@pytest.fixture
def grid1():
    return Grid.unit(1, "1/128")


def random_positive_field(grid, seed, amp=0.3):
    """Smooth strictly positive field used by several modules' tests."""
    from plaplace_fb.profiles import fourier
    return fourier(grid, seed=seed, modes=3, amp=amp, A=1.0, b=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def prepared_flat(grid, eps=0.05, q=(1.0, 0.5), b=3.0):
    """``b + q.x + t psi`` with harmonic ``psi``, ``t`` tuned to flatness ``eps`` (p = 2)."""
    x = grid.node_coords()
    psi = (x[..., 0] + 0.5) ** 2 - x[..., 1] ** 2
    base = b + x @ np.array(q)
    B1 = Ball.unit(2)
    t = eps
    for _ in range(4):
        u = ScalarField(grid, base + t * psi)
        g = discrete_gradient(u)
        flat = ball_average(g - VectorField.constant(grid, q), B1, 2) / ball_average(g, B1, 2)
        t *= eps / flat
    return ScalarField(grid, base + t * psi)
