import math
import warnings

import numpy as np
import pytest

from conftest import prepared_flat, random_positive_field
from plaplace_fb.energy import sample_gamma
from plaplace_fb.grid import Ball, Grid, VectorField, ball_average, discrete_gradient
from plaplace_fb.minimize import minimize_Jp, positivity_slope_1d
from plaplace_fb.pharmonic import HypothesisViolated
from plaplace_fb.profiles import affine
from plaplace_fb.regularity import (DenominatorNonpositive, ExponentOutOfRange, FlatnessState,
                                    OriginNotInZeroSet, ResolutionFloor, campanato_seminorm,
                                    check_energy_comparison, comparison_constant,
                                    default_alpha, dichotomy_chain, dichotomy_constants,
                                    dichotomy_experiment, dyadic_decay_track, estimate_alpha0,
                                    feasible_eta_bound, free_boundary_lipschitz_experiment,
                                    improvement_step, lipschitz_experiment, pythagoras_defect,
                                    shift_nodes, zero_set_exponent)


def affine_field(grid, q=(1.2, -0.5), b=4.0):
    return grid.field(lambda x: b + x @ np.array(q))


# --- energy comparison ---------------------------------------------------------

def test_comparison_on_p_harmonic_input(grid2):
    u = affine_field(grid2)
    r = check_energy_comparison(u, Ball.unit(2), 3.0, 0.5)
    assert r.lhs < 1e-20 and r.rhs < 1e-12 and r.passed


def test_comparison_constant_branches():
    assert comparison_constant(3, 0.5) == 2
    assert comparison_constant(1.5, 0.7) == pytest.approx((1.5 * 0.7 * 2**-1.5) ** -0.75)
    with pytest.raises(ValueError):
        comparison_constant(3, 0)


def test_pythagoras_identity():
    grid = Grid.unit(2, "1/64")
    for seed in range(3):
        defect, Iu = pythagoras_defect(random_positive_field(grid, seed), Ball.unit(2))
        assert defect <= 1e-8 * Iu


@pytest.mark.parametrize("p", [1.2, 1.5, 2.0, 3.0, 4.0])
@pytest.mark.parametrize("dim", [1, 2])
def test_comparison_holds_on_random_fields(p, dim):
    grid = Grid.unit(dim, "1/32" if dim == 2 else "1/128")
    gamma = sample_gamma(p, 200_000, seed=0, dim=2)
    for seed in range(3):
        r = check_energy_comparison(random_positive_field(grid, seed), Ball.unit(dim), p, gamma)
        assert r.passed and r.lhs > 0


# --- dichotomy -----------------------------------------------------------------

@pytest.mark.parametrize("p", [1.5, 2.0, 4.0])
def test_dichotomy_affine_is_flat(p, grid2):
    q = (1.2, -0.5)
    o = dichotomy_experiment(affine_field(grid2, q), p, 0.1, 0.25, 1.0)
    assert o.tag == "Flat"
    assert o.flatness <= 1e-12
    assert np.max(np.abs(np.array(o.q) - q)) <= 1e-10
    assert o.state.a / 4 < np.linalg.norm(o.state.q) <= 2.0 * o.state.a


def test_dichotomy_not_applicable(grid2):
    assert dichotomy_experiment(grid2.zeros(), 2, 0.1, 0.25, 1.0).tag == "NotApplicable"
    assert dichotomy_experiment(affine_field(grid2), 2, 0.1, 0.25, 10.0).tag == "NotApplicable"
    with pytest.raises(ValueError):
        dichotomy_experiment(grid2.zeros(), 2, 1.5, 0.25, 1.0)


def test_dichotomy_on_oscillation_is_raw_failure():
    # neither branch holds: the oscillation is not flattened on B_eta and has no slope
    grid = Grid.unit(2, "1/128")
    u = grid.field(lambda x: 3 + 2 * np.sin(40 * x[..., 0]) / 40)
    o = dichotomy_experiment(u, 2.0, 0.1, 0.25, 1.0)
    assert o.tag == "RawFailure"
    assert o.a_eta > o.a / 2 and o.flatness > 0.1 * o.a
    assert np.linalg.norm(o.q) < o.a / 4


# --- improvement and decay ---------------------------------------------------------

def test_improvement_on_affine_is_identity(grid2):
    q = (1.2, -0.5)
    u = affine_field(grid2, q)
    a = float(np.linalg.norm(q))
    r = improvement_step(u, FlatnessState(q, a, 0.01), 2.0)
    assert np.allclose(r.q_tilde, q, atol=1e-10)
    assert r.state.eps <= 1e-12
    assert r.zero_measure == 0
    assert r.c1 > 0


def test_improvement_hypothesis(grid2):
    u = affine_field(grid2)
    with pytest.raises(HypothesisViolated):
        improvement_step(u, FlatnessState((0.01, 0.0), 1.0, 0.1), 2.0)
    with pytest.raises(HypothesisViolated):
        improvement_step(u, FlatnessState((10.0, 0.0), 1.0, 0.1), 2.0, C0=2.0)


def test_improvement_on_prepared_flat_minimizer():
    grid = Grid.unit(2, "1/256")
    u = minimize_Jp(prepared_flat(grid), Ball.unit(2), 2.0).u
    q = (1.0, 0.5)
    B1 = Ball.unit(2)
    g = discrete_gradient(u)
    a = ball_average(g, B1, 2)
    eps = ball_average(g - VectorField.constant(grid, q), B1, 2) / a
    assert eps == pytest.approx(0.05, rel=1e-3)
    b = float(np.mean(u.values[B1.node_mask(grid)]))
    rho, alpha = 0.5, 0.5
    r = improvement_step(u, FlatnessState(q, a, eps, b), 2.0, rho=rho)
    assert r.state.eps <= rho**alpha * eps * (1 + 10 * grid.h)
    assert r.C_tilde > 0 and np.isfinite(r.C_tilde)
    assert r.c1 > 0
    nodes = grid.node_coords()[B1.scaled(0.9).node_mask(grid)]
    assert np.min(b + nodes @ np.array(q)) >= r.c1 * a * (1 - 1e-12)
    assert r.zero_exponent == 2.0  # p = n = 2


def test_zero_set_exponent_cases():
    assert zero_set_exponent(1.5, 2) == pytest.approx(4.5)
    assert zero_set_exponent(2.0, 2) == 2.0
    assert zero_set_exponent(3.0, 2) is None
    assert zero_set_exponent(2.0, 1) is None


def test_decay_of_affine_is_zero():
    grid = Grid.unit(2, "1/64")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionFloor)
        tr = dyadic_decay_track(affine_field(grid), 2.0, 0.05, 0.5, 0.5, 10)
    assert tr.truncated and len(tr.rows) == 4  # 0.5^3 >= 8/64 > 0.5^4
    for k, a_k, q_k, f in tr.rows:
        assert f <= 1e-12
        assert np.allclose(q_k, (1.2, -0.5), atol=1e-10)
    assert tr.passed


def test_resolution_floor_warns():
    with pytest.warns(ResolutionFloor):
        dyadic_decay_track(affine_field(Grid.unit(2, "1/32")), 2.0, 0.05, 0.5, 0.5, 10)


def test_decay_on_prepared_flat_minimizer():
    grid = Grid.unit(2, "1/64")
    u = minimize_Jp(prepared_flat(grid), Ball.unit(2), 2.0).u
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionFloor)
        tr = dyadic_decay_track(u, 2.0, 0.05, 0.5, 0.5, 3, q0=(1.0, 0.5))
    assert tr.decay_ok
    flats = [r[3] for r in tr.rows]
    for f0, f1 in zip(flats[1:], flats[2:]):
        assert f1 <= 0.5**0.5 * f0 * (1 + 10 * grid.h)
    assert tr.increment_sum <= tr.increment_bound * (1 + tr.slack)


def test_alpha_defaults():
    grid = Grid.unit(2, "1/64")
    assert estimate_alpha0(prepared_flat(grid), 2.0) == pytest.approx(1.0, abs=0.05)
    assert default_alpha(1.0, 2.0, 2.0) == 0.5
    assert default_alpha(0.8, 0.3, 3.0) == pytest.approx(0.1)


# --- Campanato -----------------------------------------------------------------------

def test_campanato_constant_and_invariances():
    grid = Grid.unit(2, "1/32")
    c = campanato_seminorm(grid.field(lambda x: 2 + 0 * x[..., 0]), 3.5)
    assert c.seminorm == 0 and c.holder_seminorm == 0
    g = grid.field(lambda x: np.sin(2 * x[..., 0]) * x[..., 1])
    centers = [np.zeros(2), np.array([0.25, -0.25])]
    base = campanato_seminorm(g, 3.5, centers=centers)
    shifted = campanato_seminorm(g + 7.0, 3.5, centers=centers)
    scaled = campanato_seminorm(g * -3.0, 3.5, centers=centers)
    assert shifted.seminorm == pytest.approx(base.seminorm, rel=1e-9)
    assert scaled.seminorm == pytest.approx(3 * base.seminorm, rel=1e-12)
    assert scaled.holder_seminorm == pytest.approx(3 * base.holder_seminorm, rel=1e-12)
    assert base.seminorm_inf <= base.seminorm * (1 + 1e-12)


def test_campanato_inf_form_for_other_p():
    grid = Grid.unit(2, "1/32")
    g = grid.field(lambda x: np.abs(x[..., 0]) + x[..., 1] ** 3)
    r = campanato_seminorm(g, 3.0, p=3.0)
    assert 0 < r.seminorm_inf <= r.seminorm * (1 + 1e-12)
    assert r.gamma == pytest.approx(1 / 3)


def test_campanato_errors():
    grid = Grid.unit(2, "1/32")
    with pytest.raises(ExponentOutOfRange):
        campanato_seminorm(grid.zeros(), 2.0)
    with pytest.raises(ExponentOutOfRange):
        campanato_seminorm(grid.zeros(), 4.5, p=2)
    with pytest.raises(ValueError):
        campanato_seminorm(grid.zeros(), 3.0, radii=[grid.h])


def test_campanato_linear_is_scale_invariant():
    ratios = []
    for k in (32, 64):
        grid = Grid.unit(2, 1 / k)
        r = campanato_seminorm(grid.field(lambda x: x[..., 0]), 4.0)
        assert r.holder_seminorm == pytest.approx(1.0, rel=1e-12)
        ratios.append(r.ratio)
    assert ratios[0] == pytest.approx(ratios[1], rel=1e-9)


def test_campanato_discriminator():
    vals = {}
    for k in (32, 64):
        grid = Grid.unit(2, 1 / k)
        g = grid.field(lambda x: np.sqrt(np.abs(x[..., 0])))
        r1 = campanato_seminorm(g, 4.0)
        r_half = campanato_seminorm(g, 3.0)
        vals[k] = (r1.by_radius[min(r1.by_radius)], r_half.seminorm)
    assert vals[64][0] >= 1.3 * vals[32][0]
    assert vals[64][1] <= 1.1 * vals[32][1]


# --- Lipschitz ---------------------------------------------------------------------------

def test_lipschitz_zero(grid2):
    r = lipschitz_experiment(grid2.zeros(), 2.0)
    assert (r.sup_grad_half, r.lp_full, r.realized_C) == (0, 0, 0)
    assert free_boundary_lipschitz_experiment(grid2.zeros(), 2.0, 0.3) == 0


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_lipschitz_one_dimensional(p):
    # data 0.8 at x = 1 puts the free boundary 1 - 0.8 (p-1)^(1/p) inside B_1/2
    grid = Grid.unit(1, "1/512")
    u = minimize_Jp(affine(grid, A=0.4, b=0.4), Ball.unit(1), p).u
    r = lipschitz_experiment(u, p)
    assert r.sup_grad_half == pytest.approx((p - 1) ** (-1 / p), rel=0.02)
    assert r.realized_C <= 1


def test_free_boundary_sup_is_amplitude_independent():
    grid = Grid.unit(1, "1/512")
    sups = []
    for A in (0.1, 0.3, 0.5):
        u = minimize_Jp(affine(grid, A=A / 2, b=A / 2), Ball.unit(1), 2.0).u
        _, fb = positivity_slope_1d(u)
        w = shift_nodes(u, int(round(fb / grid.h)))
        sups.append(free_boundary_lipschitz_experiment(w, 2.0, 0.05))
    assert max(sups) <= 1.05 * min(sups)
    assert sups[0] == pytest.approx(1.0, rel=0.05)


def test_free_boundary_sup_stable_under_refinement():
    # wedge data A |x1|: the zero band around the x2-axis contains the origin
    grid = Grid.unit(2, "1/128")
    rep = minimize_Jp(grid.field(lambda x: 0.5 * np.abs(x[..., 0])), Ball.unit(2), 3.0)
    fine = free_boundary_lipschitz_experiment(rep.u, 3.0, 0.5)
    coarse = free_boundary_lipschitz_experiment(rep.coarse.u, 3.0, 0.5)
    assert rep.coarse.u.grid.h == 2 * grid.h
    assert abs(fine - coarse) <= 0.1 * coarse


def test_origin_must_be_in_zero_set(grid2):
    with pytest.raises(OriginNotInZeroSet):
        free_boundary_lipschitz_experiment(affine_field(grid2), 2.0, 0.2)


# --- explicit constants -------------------------------------------------------------

def test_constants_example():
    p, n, eps, C, C1, alpha = 2.0, 2, 0.1, 1.0, 1.0, 0.5
    assert feasible_eta_bound(p, eps, C, C1, alpha) == pytest.approx(0.0025, rel=1e-9)
    eta = 0.001
    M, s0 = dichotomy_constants(p, n, eps, eta, C, C1, alpha)
    assert M == pytest.approx(math.sqrt(2 * eta**-2 / (0.01 - 4 * eta)), rel=1e-14)
    assert s0 == pytest.approx(eta**3, rel=1e-14)
    with pytest.raises(DenominatorNonpositive) as info:
        dichotomy_constants(p, n, eps, 0.003, C, C1, alpha)
    assert info.value.gap == pytest.approx(0.01 - 0.012)


def test_constants_p_below_two():
    p, n, eps, eta, C, C1, alpha = 1.5, 2, 0.2, 1e-3, 0.5, 0.5, 0.4
    M, s0 = dichotomy_constants(p, n, eps, eta, C, C1, alpha)
    D = eps**p - 2 ** (p - 1) * C * eta - 2 ** (p - 1) * C1 * eta ** (alpha * p)
    assert M == pytest.approx((2 ** (p - 1) * C * eta**-n / D) ** (2 / p**2), rel=1e-13)
    assert s0 == pytest.approx(eta ** ((n + 1) * 2 / p), rel=1e-13)


def test_chain_is_tight_at_returned_constants():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rng.uniform(1.1, 5)
        eps, C, C1, alpha = rng.uniform(0.05, 0.5), rng.uniform(0.1, 3), rng.uniform(0.1, 3), rng.uniform(0.1, 1)
        eta = feasible_eta_bound(p, eps, C, C1, alpha) * rng.uniform(0.05, 0.9)
        n = int(rng.integers(1, 3))
        M, s0 = dichotomy_constants(p, n, eps, eta, C, C1, alpha)
        lhs, rhs = dichotomy_chain(p, n, eps, eta, C, C1, alpha, M, s0)
        assert abs(lhs - rhs) <= 1e-12 * rhs
        # larger a keeps the chain valid
        lhs2, rhs2 = dichotomy_chain(p, n, eps, eta, C, C1, alpha, 2 * M, s0)
        assert lhs2 <= rhs2


def test_M_is_not_monotone_over_the_whole_feasible_range():
    # p = 2, n = 2, eps = 0.1, C = C1 = 1, alpha = 1/2: M^2 = 2 / (eta^2 (0.01 - 4 eta)),
    # decreasing for eta < 1/600 and increasing on (1/600, 1/400)
    def M(eta):
        return dichotomy_constants(2.0, 2, 0.1, eta, 1.0, 1.0, 0.5)[0]
    small = np.linspace(1e-5, 1 / 600, 50)
    assert np.all(np.diff([M(e) for e in small]) < 0)
    large = np.linspace(1 / 600 + 1e-6, 0.0025 - 1e-6, 50)
    assert np.all(np.diff([M(e) for e in large]) > 0)
