"""End-to-end acceptance checks, one per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured numbers
and the wall time, then asserts.  Run with ``pytest tests/test_acceptance.py -v``.
"""
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from conftest import prepared_flat, random_positive_field
from plaplace_fb.energy import sample_gamma
from plaplace_fb.grid import Ball, Grid
from plaplace_fb.minimize import (AlmostMinParams, PhiSpec, bump_counterexample,
                                  make_nonlocal_almost_minimizer, minimize_Jp,
                                  positivity_slope_1d, verify_almost_min)
from plaplace_fb.pharmonic import EllipticityBounds, averaged_jacobian, p_harmonic_replacement
from plaplace_fb.profiles import affine, bump, fourier, harmonic_poly
from plaplace_fb.regularity import (ResolutionFloor, campanato_seminorm,
                                    check_energy_comparison, dichotomy_chain,
                                    dichotomy_constants, dichotomy_experiment,
                                    dyadic_decay_track, feasible_eta_bound,
                                    free_boundary_lipschitz_experiment, lipschitz_experiment,
                                    pythagoras_defect, shift_nodes)
from test_pharmonic import five_point_solve


@pytest.fixture
def emit(capsys):
    t0 = time.perf_counter()

    def _emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail} "
                  f"({time.perf_counter() - t0:.1f}s)")
    return _emit


def test_criterion_01_one_dimensional_free_boundary(emit):
    grid = Grid.unit(1, "1/512")
    A, worst_slope, worst_fb = 0.5, 0.0, 0.0
    for p in (1.5, 2.0, 3.0, 4.0):
        u = minimize_Jp(affine(grid, A=A), Ball.unit(1), p).u
        slope, fb = positivity_slope_1d(u)
        worst_slope = max(worst_slope, abs(slope / (p - 1) ** (-1 / p) - 1))
        worst_fb = max(worst_fb, abs(fb - (1 - A * (p - 1) ** (1 / p))) / grid.h)
    ok = worst_slope <= 0.02 and worst_fb <= 2
    emit("1 1D slope and free boundary", ok,
         f"max slope rel err {worst_slope:.2e} (<= 0.02), max |fb err|/h {worst_fb:.3f} (<= 2)")
    assert ok


def test_criterion_02_quadratic_replacement_oracle(emit):
    grid = Grid.unit(2, "1/128")
    # harmonic polynomial plus a harmonic non-polynomial term, so the discrete solve is nontrivial
    u = harmonic_poly(grid) + grid.field(
        lambda x: 0.3 * np.sin(3 * x[..., 0]) * np.cosh(3 * x[..., 1]))
    v = p_harmonic_replacement(u, Ball.unit(2), 2.0, tol=1e-14).v
    err = np.max(np.abs(v.values - five_point_solve(u, Ball.unit(2))))
    small = Grid.unit(2, "1/64")
    worst = 0.0
    for seed in range(50):
        defect, Iu = pythagoras_defect(random_positive_field(small, seed), Ball.unit(2))
        worst = max(worst, defect / Iu)
    ok = err <= 1e-8 and worst <= 1e-8
    emit("2 p=2 oracle", ok,
         f"max-norm error {err:.2e} (<= 1e-8), worst Pythagoras defect {worst:.2e} (<= 1e-8)")
    assert ok


def _comparison_case(args):
    p, seed, gamma = args
    grid = Grid.unit(2, "1/128")
    u = fourier(grid, seed=seed, modes=3, amp=0.15)
    r = check_energy_comparison(u, Ball.unit(2), p, gamma, tol=1e-8)
    return r.passed, r.lhs / r.rhs if r.rhs > 0 else 0.0


def test_criterion_03_energy_comparison_sweep(emit):
    ps = (1.2, 1.5, 3.0, 4.0)
    gammas = {p: sample_gamma(p, 1_000_000, seed=0) for p in ps}
    jobs = [(p, seed, gammas[p]) for p in ps for seed in range(100)]
    with ProcessPoolExecutor(os.cpu_count() or 1) as pool:
        results = list(pool.map(_comparison_case, jobs, chunksize=4))
    by_p = {p: [r for (q, _, _), r in zip(jobs, results) if q == p] for p in ps}
    frac = {p: sum(ok for ok, _ in rs) / len(rs) for p, rs in by_p.items()}
    ratio = {p: max(x for _, x in rs) for p, rs in by_p.items()}
    ok = all(f == 1.0 for f in frac.values())
    emit("3 comparison sweep", ok,
         ", ".join(f"p={p}: {100 * frac[p]:.0f}% (max lhs/rhs {ratio[p]:.3f})" for p in ps))
    assert ok


def test_criterion_04_ellipticity(emit):
    rng = np.random.default_rng(2024)
    worst_lo, worst_hi, worst_quad = np.inf, 0.0, 0.0
    for _ in range(10_000):
        p = rng.uniform(1.05, 6.0)
        q = rng.normal(size=2)
        nq = np.linalg.norm(q)
        d = rng.normal(size=2)
        eta = d / np.linalg.norm(d) * rng.uniform(0, 0.5) * nq * (1 - 1e-9)
        A8 = averaged_jacobian(q, eta[None], p, quad_nodes=8)[0]
        A16 = averaged_jacobian(q, eta[None], p, quad_nodes=16)[0]
        e8, e16 = np.linalg.eigvalsh(A8), np.linalg.eigvalsh(A16)
        b = EllipticityBounds.for_p(p)
        scale = nq ** (p - 2)
        worst_lo = min(worst_lo, e8.min() / (b.lam * scale))
        worst_hi = max(worst_hi, e8.max() / (b.Lam * scale))
        worst_quad = max(worst_quad, np.max(np.abs(e8 - e16)))
    ok = worst_lo >= 1 and worst_hi <= 1 and worst_quad <= 1e-10
    emit("4 ellipticity", ok,
         f"min eig/lower {worst_lo:.4f} (>= 1), max eig/upper {worst_hi:.4f} (<= 1), "
         f"8 vs 16 nodes {worst_quad:.2e} (<= 1e-10)")
    assert ok


def test_criterion_05_dichotomy_on_affine(emit):
    grid = Grid.unit(2, "1/64")
    flat, qerr, tags = 0.0, 0.0, set()
    rng = np.random.default_rng(5)
    for p in (1.5, 2.0, 3.0, 4.0):
        q = rng.uniform(-2, 2, size=2)
        u = grid.field(lambda x: 5 + x @ q)
        o = dichotomy_experiment(u, p, 0.1, 0.25, 0.5)
        tags.add(o.tag)
        flat = max(flat, o.flatness)
        qerr = max(qerr, np.max(np.abs(np.asarray(o.q) - q)))
    zero = dichotomy_experiment(grid.zeros(), 2.0, 0.1, 0.25, 0.5).tag
    ok = tags == {"Flat"} and flat <= 1e-12 and qerr <= 1e-10 and zero == "NotApplicable"
    emit("5 dichotomy on affine data", ok,
         f"tags {sorted(tags)}, flatness {flat:.1e} (<= 1e-12), q error {qerr:.1e} "
         f"(<= 1e-10), zero field {zero}")
    assert ok


def test_criterion_06_dyadic_decay(emit):
    eps, rho, alpha, q0 = 0.05, 0.5, 0.5, (1.0, 0.5)
    traces = {}
    for k in (64, 128):
        grid = Grid.unit(2, 1 / k)
        u = minimize_Jp(prepared_flat(grid, eps=eps, q=q0), Ball.unit(2), 2.0).u
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ResolutionFloor)
            traces[k] = dyadic_decay_track(u, 2.0, eps, rho, alpha, 10, q0=q0)
    t1, t2 = traces[64], traces[128]
    drift = abs(t2.C_tilde - t1.C_tilde) / t1.C_tilde
    ok = t1.passed and t2.passed and drift <= 0.10
    emit("6 dyadic decay", ok,
         f"steps {len(t1.rows) - 1}/{len(t2.rows) - 1}, decay {t1.decay_ok}/{t2.decay_ok}, "
         f"sum|dq| {t1.increment_sum:.3e}<={t1.increment_bound:.3e} and "
         f"{t2.increment_sum:.3e}<={t2.increment_bound:.3e}, "
         f"C~ {t1.C_tilde:.5f} vs {t2.C_tilde:.5f} (drift {drift:.2%} <= 10%)")
    assert ok


def test_criterion_07_campanato_holder(emit):
    centers = [np.zeros(2), np.array([0.25, 0.25]), np.array([-0.5, 0.0])]
    lam = 4.0  # n + p * gamma with n = p = 2, gamma = 1

    def ratios(k):
        grid = Grid.unit(2, 1 / k)
        fields = {"x1": grid.field(lambda x: x[..., 0]), "bump": bump(grid)}
        return {name: campanato_seminorm(g, lam, centers=centers).ratio
                for name, g in fields.items()}

    coarse, fine = ratios(32), ratios(64)
    C_eq = max(max(r, 1 / r) for r in coarse.values())
    inside = all(1 / C_eq <= r <= C_eq for r in fine.values())

    sq = {}
    for k in (32, 64):
        grid = Grid.unit(2, 1 / k)
        g = grid.field(lambda x: np.sqrt(np.abs(x[..., 0])))
        r1 = campanato_seminorm(g, 4.0)
        sq[k] = (r1.by_radius[min(r1.by_radius)], campanato_seminorm(g, 3.0).seminorm)
    grows = sq[64][0] >= 1.3 * sq[32][0]
    bounded = sq[64][1] <= 1.1 * sq[32][1]
    ok = inside and grows and bounded
    emit("7 Campanato vs Hoelder", ok,
         f"C_eq {C_eq:.4f}, coarse {coarse['x1']:.4f}/{coarse['bump']:.4f}, "
         f"fine {fine['x1']:.4f}/{fine['bump']:.4f}; sqrt|x1| gamma=1 "
         f"{sq[32][0]:.3f}->{sq[64][0]:.3f}, gamma=1/2 {sq[32][1]:.3f}->{sq[64][1]:.3f}")
    assert ok


def test_criterion_08_lipschitz_stability(emit):
    grid = Grid.unit(2, "1/64")
    worst = {}
    for p in (1.5, 2.0, 3.0):
        drift = 0.0
        for seed in range(20):
            data = fourier(grid, seed=seed, modes=3, amp=0.3, A=1.0, b=1.0, clip=1)
            rep = minimize_Jp(data, Ball.unit(2), p, tol=1e-8)
            fine = lipschitz_experiment(rep.u, p).realized_C
            coarse = lipschitz_experiment(rep.coarse.u, p).realized_C
            drift = max(drift, abs(fine - coarse) / coarse)
        worst[p] = drift

    line = Grid.unit(1, "1/256")
    spread = {}
    for p in (1.5, 2.0, 3.0):
        sups = []
        for A in (0.1, 0.3, 0.5):
            u = minimize_Jp(affine(line, A=A), Ball.unit(1), p).u
            _, fb = positivity_slope_1d(u)
            w = shift_nodes(u, int(round(fb / line.h)))
            sups.append(free_boundary_lipschitz_experiment(w, p, 0.05))
        spread[p] = max(sups) / min(sups) - 1
    ok = max(worst.values()) <= 0.10 and max(spread.values()) <= 0.05
    emit("8 Lipschitz stability", ok,
         "2D drift " + ", ".join(f"p={p}: {d:.2%}" for p, d in worst.items()) + " (<= 10%); "
         "1D amplitude spread " + ", ".join(f"p={p}: {s:.2%}" for p, s in spread.items())
         + " (<= 5%)")
    assert ok


def test_criterion_09_almost_minimizer_pipeline(emit):
    grid = Grid.unit(1, "1/256")
    B1 = Ball.unit(1)
    u, params, _ = make_nonlocal_almost_minimizer(affine(grid, A=0.5), B1, 2.0,
                                                  PhiSpec("clamp"))
    params = AlmostMinParams(B1.volume, 1.0)
    clean = verify_almost_min(u, params, 2.0, n_balls=50, seed=0)
    ball = Ball((0.75,), 0.04)
    bad, _ = bump_counterexample(u, ball, 2.0)
    broken = verify_almost_min(bad, params, 2.0, balls=[ball])
    ok = clean.passed and not broken.passed and broken.worst.center == ball.center
    emit("9 almost-minimizer pipeline", ok,
         f"clean worst ratio {clean.worst_ratio:.4f} on 50 balls, corrupted worst ball "
         f"c={broken.worst.center} r={broken.worst.radius} ratio {broken.worst_ratio:.3f} "
         f"> allowed {broken.worst.allowed:.3f}")
    assert ok


def test_criterion_10_constants_self_consistency(emit):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(1.1, 5.0)
        n = int(rng.integers(1, 4))
        eps = rng.uniform(0.05, 0.9)
        C, C1, alpha = rng.uniform(0.1, 5), rng.uniform(0.1, 5), rng.uniform(0.05, 1)
        eta = feasible_eta_bound(p, eps, C, C1, alpha) * rng.uniform(0.01, 0.99)
        M, s0 = dichotomy_constants(p, n, eps, eta, C, C1, alpha)
        lhs, rhs = dichotomy_chain(p, n, eps, eta, C, C1, alpha, M, s0)
        worst = max(worst, abs(lhs - rhs) / rhs)
    ok = worst <= 1e-12
    emit("10 constants self-consistency", ok, f"max |chain residual| {worst:.2e} (<= 1e-12)")
    assert ok
