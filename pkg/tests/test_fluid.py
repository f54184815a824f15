"""Stream-function fields: structural invariants and frozen energy values."""

import numpy as np
import pytest
from scipy.interpolate import BSpline

from beamfsi.fluid import (
    FluidGrid,
    StreamField,
    boundary_max_speed,
    divergence_two_ways,
    eps_sq_from_mixed,
    gradlap_sq_from_mixed,
    interpolate_stream,
    stream_bump,
)


def _random_field(n=8, ell=1.0, seed=5):
    rng = np.random.default_rng(seed)
    grid = FluidGrid(ell, n)
    return StreamField(grid, rng.standard_normal(grid.free_shape))


def _interior_points(rng, grid, count):
    # strictly inside cells so a.e. derivatives are unambiguous
    ix = rng.integers(0, grid.n, count)
    iy = rng.integers(0, grid.n, count)
    tx = rng.uniform(0.15, 0.85, count)
    ty = rng.uniform(0.15, 0.85, count)
    x = (ix + tx) * grid.delta
    y = (iy + ty) * grid.delta - grid.ell / 2.0
    return np.stack([x, y], axis=1)


def test_no_slip_is_structural():
    f = _random_field()
    assert boundary_max_speed(f) < 1e-11


def test_divergence_vanishes_both_summation_orders():
    rng = np.random.default_rng(2)
    f = _random_field(seed=9)
    pts = _interior_points(rng, f.grid, 500)
    assert divergence_two_ways(f, pts) < 1e-12


def test_matches_independent_bspline_evaluator():
    # oracle: scipy's de Boor on the same knots and full coefficient grid
    f = _random_field(n=8)
    g = f.grid
    rng = np.random.default_rng(4)
    pts = _interior_points(rng, g, 40)
    t = g.delta * np.arange(-3, g.n + 4)
    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (2, 2), (3, 1)]:
        sx = BSpline(t, f._full, 3, extrapolate=True).derivative(dx) if dx \
            else BSpline(t, f._full, 3, extrapolate=True)
        rows = sx(pts[:, 0])                       # (p, n+3)
        want = np.empty(len(pts))
        for p in range(len(pts)):
            sy = BSpline(t, rows[p], 3, extrapolate=True)
            if dy:
                sy = sy.derivative(dy)
            want[p] = sy(pts[p, 1] + g.ell / 2.0)
        got = f.psi(pts, dx, dy)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_frozen_trig_energies():
    # psi = sin(pi x) sin(2 pi y + pi) on the unit box:
    # int |eps(u)|^2 = 25 pi^4 / 8, int |u|^2 = 5 pi^2 / 4,
    # int |grad lap u|^2 = 58 pi^8   (adaptive symbolic oracle)
    grid = FluidGrid(1.0, 32)
    pts, w = grid.cell_gauss(4)
    x, y = pts[:, 0], pts[:, 1]
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    s2, c2 = np.sin(2 * np.pi * y + np.pi), np.cos(2 * np.pi * y + np.pi)
    p11 = 2 * np.pi**2 * c * c2
    p20 = -np.pi**2 * s * s2
    p02 = -4 * np.pi**2 * s * s2
    eps_energy = float(np.sum(w * eps_sq_from_mixed(p11, p20, p02)))
    assert eps_energy == pytest.approx(25 * np.pi**4 / 8, rel=1e-8)

    u1 = 2 * np.pi * s * c2
    u2 = -np.pi * c * s2
    kinetic = float(np.sum(w * (u1**2 + u2**2)))
    assert kinetic == pytest.approx(5 * np.pi**2 / 4, rel=1e-8)

    p31 = -2 * np.pi**4 * c * c2
    p13 = -8 * np.pi**4 * c * c2
    p22 = -4 * np.pi**4 * s * s2
    gl = float(np.sum(w * gradlap_sq_from_mixed(p31, p13, p22)))
    assert gl == pytest.approx(58 * np.pi**8, rel=1e-5)


def test_korn_identity_for_trace_free_clamped_fields():
    # for divergence-free fields vanishing on the boundary,
    # int |eps(u)|^2 = 1/2 int |grad u|^2 exactly; quadrature order 4 is
    # exact for the bicubic integrands, so the ratio is 0.5 to roundoff
    for seed in range(5):
        f = _random_field(n=10, seed=seed)
        pts, w = f.grid.cell_gauss(4)
        m = f.mixed(pts, [(1, 1), (2, 0), (0, 2)])
        num = float(np.sum(w * eps_sq_from_mixed(m[(1, 1)], m[(2, 0)], m[(0, 2)])))
        den = float(np.sum(w * (2 * m[(1, 1)]**2 + m[(2, 0)]**2 + m[(0, 2)]**2)))
        assert num / den == pytest.approx(0.5, abs=1e-12)


def test_velocity_jets_match_finite_differences():
    f = _random_field(n=8, seed=12)
    rng = np.random.default_rng(8)
    pts = _interior_points(rng, f.grid, 25)
    u, gu, hu = f.velocity_jets(pts)
    h = 1e-6
    for j, e in enumerate(np.eye(2)):
        up = f.velocity(pts + h * e)
        um = f.velocity(pts - h * e)
        np.testing.assert_allclose(gu[:, :, j], (up - um) / (2 * h),
                                   rtol=1e-5, atol=1e-5)
        _, gup, _ = f.velocity_jets(pts + h * e)
        _, gum, _ = f.velocity_jets(pts - h * e)
        fd = (gup - gum) / (2 * h)             # d_j applied to gu[:, i, k]
        np.testing.assert_allclose(hu[:, :, :, j], fd, rtol=1e-4, atol=1e-4)


def test_grad_laplacian_matches_finite_differences():
    f = _random_field(n=8, seed=3)
    g = f.grid
    rng = np.random.default_rng(21)
    # centers of cells, FD step small enough to stay inside one cell
    pts = _interior_points(rng, g, 20)
    pts = (np.floor((pts + [0, g.ell / 2]) / g.delta) + 0.5) * g.delta - [0, g.ell / 2]
    gl = f.grad_laplacian(pts)
    h = g.delta * 1e-3

    def lap_u(q):
        _, _, hu = f.velocity_jets(q)
        return hu[:, :, 0, 0] + hu[:, :, 1, 1]

    for j, e in enumerate(np.eye(2)):
        fd = (lap_u(pts + h * e) - lap_u(pts - h * e)) / (2 * h)
        np.testing.assert_allclose(gl[:, :, j], fd, rtol=1e-4, atol=1e-4)


def test_interpolation_reproduces_spline_space():
    f = _random_field(n=8, seed=17)

    def fn(X, Y):
        pts = np.stack([X.ravel(), Y.ravel()], 1)
        return f.psi(pts).reshape(X.shape)

    f2 = interpolate_stream(f.grid, fn)
    np.testing.assert_allclose(f2.free, f.free, rtol=1e-9, atol=1e-10)


def test_stream_bump_is_inside_and_nontrivial():
    grid = FluidGrid(1.0, 16)
    f = stream_bump(grid, amplitude=0.5)
    assert boundary_max_speed(f) < 1e-11
    pts = np.array([[0.5, 0.0]])
    assert np.linalg.norm(f.velocity(pts)) > 1e-3 or abs(f.psi(pts)[0]) > 1e-3
