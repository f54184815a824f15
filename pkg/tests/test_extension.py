"""Interface-field extension: swept flux, divergence profile, trace."""

import numpy as np
import pytest

from conftest import random_feasible_curve
from beamfsi.geometry import curve_from_height, rest_curve
from beamfsi.extension import (
    CurveTooCloseError,
    alternate_bumps,
    beam_field,
    curve_sides,
    lambda_by_parts,
    lambda_of,
    solenoidal_extension,
    standard_bumps,
    vertical_cutoff,
)

ELL = 1.0


def poly_field(elements=16):
    """In-space field (x^2(1-x), x(1-x)^2), vanishing at both ends."""
    return beam_field(
        elements, ELL,
        lambda x: np.stack([x**2 * (1 - x), x * (1 - x) ** 2], 1),
        lambda x: np.stack([2 * x - 3 * x**2, 1 - 4 * x + 3 * x**2], 1),
        lambda x: np.stack([2 - 6 * x, -4 + 6 * x], 1))


def vertical_parabola(elements=32):
    return beam_field(
        elements, ELL,
        lambda x: np.stack([np.zeros_like(x), x * (1 - x)], 1),
        lambda x: np.stack([np.zeros_like(x), 1 - 2 * x], 1),
        lambda x: np.stack([np.zeros_like(x), -2 * np.ones_like(x)], 1))


@pytest.fixture(scope="module")
def rest_ext():
    return solenoidal_extension(rest_curve(32, ELL), vertical_parabola(),
                                n_mac=32)


@pytest.fixture(scope="module")
def wavy_ext():
    rng = np.random.default_rng(7)
    curve = random_feasible_curve(rng, elements=16, amplitude=0.08)
    return solenoidal_extension(curve, poly_field(), n_mac=32)


# --- swept flux -------------------------------------------------------------

def test_flux_of_sine_field_at_rest():
    """Frozen: int_0^1 sin(pi x) dx = 2/pi through the interpolated field."""
    b = beam_field(
        32, ELL,
        lambda x: np.stack([np.zeros_like(x), np.sin(np.pi * x)], 1),
        lambda x: np.stack([np.zeros_like(x), np.pi * np.cos(np.pi * x)], 1),
        lambda x: np.stack([np.zeros_like(x),
                            -np.pi**2 * np.sin(np.pi * x)], 1))
    c = rest_curve(32, ELL)
    assert lambda_of(c, b) == pytest.approx(2.0 / np.pi, abs=1e-9)
    assert lambda_by_parts(c, b) == pytest.approx(2.0 / np.pi, abs=1e-9)


def test_flux_of_polynomial_field_exact():
    """In-space data make the quadrature exact: int x(1-x)^2 = 1/12."""
    c = rest_curve(16, ELL)
    b = poly_field()
    assert lambda_of(c, b) == pytest.approx(1.0 / 12.0, abs=1e-14)
    assert lambda_by_parts(c, b) == pytest.approx(1.0 / 12.0, abs=1e-14)


def test_flux_quadratures_agree_on_wavy_curves(rng):
    """The by-parts identity is exact for in-space curve and field."""
    b = poly_field()
    for _ in range(5):
        c = random_feasible_curve(rng, elements=16, amplitude=0.1)
        lam = lambda_of(c, b)
        assert lambda_by_parts(c, b) == pytest.approx(lam, abs=1e-12 * (1 + abs(lam)))


# --- vertical cutoff --------------------------------------------------------

def test_vertical_cutoff_profile():
    band = ELL / 6.0
    assert vertical_cutoff(np.array([-0.5, 0.5]), ELL, band).tolist() == [0, 0]
    plateau = np.linspace(-0.5 + band, 0.5 - band, 9)
    np.testing.assert_allclose(vertical_cutoff(plateau, ELL, band), 1.0)
    y = np.array([-0.45, -0.38, 0.0, 0.36, 0.47])
    h = 1e-6
    for d in range(1, 4):
        fd = (vertical_cutoff(y + h, ELL, band, d - 1)
              - vertical_cutoff(y - h, ELL, band, d - 1)) / (2 * h)
        got = vertical_cutoff(y, ELL, band, d)
        scale = np.max(np.abs(got)) + 1.0
        np.testing.assert_allclose(got, fd, atol=1e-4 * scale)


# --- extension field --------------------------------------------------------

def test_divergence_profile_to_solver_precision(rest_ext, wavy_ext):
    """Discrete divergence equals flux (psi_minus - psi_plus) cell by cell."""
    assert rest_ext.divergence_residual() < 1e-10
    assert wavy_ext.divergence_residual() < 1e-10


def test_grid_flux_tracks_quadrature_flux(rest_ext, wavy_ext):
    assert rest_ext.flux_quad == pytest.approx(1.0 / 6.0, abs=1e-14)
    for ext in (rest_ext, wavy_ext):
        dx = ext.sides.dom_minus.dx
        bmax = float(np.max(np.abs(ext.b.dofs[:, 0, :])))
        b1max = float(np.max(np.abs(ext.b.dofs[:, 1, :])))
        assert abs(ext.flux_grid - ext.flux_quad) <= 2 * dx * (1 + bmax + b1max)


def test_trace_within_pinned_tolerance(rest_ext, wavy_ext):
    for ext in (rest_ext, wavy_ext):
        tol = ext.trace_tolerance()
        bmax = float(np.max(np.abs(ext.b.dofs[:, 0, :])))
        assert tol < 0.2 * (1 + bmax)
        assert ext.trace_error() <= tol


def test_wall_values(rest_ext, wavy_ext):
    for ext in (rest_ext, wavy_ext):
        assert ext.wall_normal_max() < 1e-12
        assert ext.boundary_max() <= ext.trace_tolerance()


def test_gradient_matches_finite_differences(wavy_ext):
    dx = 1.0 / 32
    ii = np.array([3, 7, 12, 18, 25])
    jj = np.array([4, 9, 15, 21, 27])
    pts = np.stack([(ii + 0.25) * dx, (jj + 0.25) * dx - 0.5], 1)
    g = wavy_ext.grad(pts)
    h = 1e-6
    for ax in range(2):
        e = np.zeros(2)
        e[ax] = h
        fd = (wavy_ext.sample(pts + e) - wavy_ext.sample(pts - e)) / (2 * h)
        np.testing.assert_allclose(g[:, :, ax], fd, atol=1e-8 * (1 + np.max(np.abs(g))))


def _fd_gradlap(ext, pts, hh=2e-4):
    def lap(p):
        ex = np.array([hh, 0.0])
        ey = np.array([0.0, hh])
        return (ext.sample(p + ex) + ext.sample(p - ex) + ext.sample(p + ey)
                + ext.sample(p - ey) - 4 * ext.sample(p)) / hh**2

    out = np.empty((len(pts), 2, 2))
    for ax in range(2):
        e = np.zeros(2)
        e[ax] = hh
        out[:, :, ax] = (lap(pts + e) - lap(pts - e)) / (2 * hh)
    return out


def test_gradlap_matches_finite_differences_in_plateau(wavy_ext):
    """Away from the cutoff bands only the pullback chain contributes."""
    dx = 1.0 / 32
    ii = np.array([3, 7, 12, 18, 25])
    pts = np.stack([(ii + 0.25) * dx, (ii % 10 + 0.25) * dx - 0.17], 1)
    gl = wavy_ext.gradlap(pts)
    fd = _fd_gradlap(wavy_ext, pts)
    np.testing.assert_allclose(gl, fd, atol=1e-3 * (1 + np.max(np.abs(gl))))


def test_gradlap_matches_finite_differences_in_band(rest_ext):
    """Inside the cutoff band the beta derivatives carry the jet."""
    dx = 1.0 / 32
    ii = np.array([3, 7, 12, 18, 25])
    pts = np.stack([(ii + 0.25) * dx, 0.38 + 0.002 * np.arange(5)], 1)
    gl = rest_ext.gradlap(pts)
    assert np.max(np.abs(gl)) > 10.0
    fd = _fd_gradlap(rest_ext, pts)
    np.testing.assert_allclose(gl, fd, atol=1e-3 * (1 + np.max(np.abs(gl))))


def test_bump_variant_gives_same_flux_and_profile():
    curve = rest_curve(16, ELL)
    b = vertical_parabola(16)
    ext_std = solenoidal_extension(curve, b, n_mac=32, bumps=standard_bumps(ELL))
    ext_alt = solenoidal_extension(curve, b, n_mac=32, bumps=alternate_bumps(ELL))
    assert abs(ext_std.flux_grid - ext_alt.flux_grid) < 1e-14
    assert ext_alt.divergence_residual() < 1e-10
    assert ext_alt.trace_error() <= ext_alt.trace_tolerance()


def test_rejects_field_with_nonzero_ends():
    b = beam_field(8, ELL,
                   lambda x: np.stack([x, np.zeros_like(x)], 1),
                   lambda x: np.stack([np.ones_like(x), np.zeros_like(x)], 1),
                   lambda x: np.stack([np.zeros_like(x), np.zeros_like(x)], 1))
    with pytest.raises(ValueError, match="vanish"):
        solenoidal_extension(rest_curve(8, ELL), b, n_mac=16)


def test_rejects_curve_reaching_bump_band():
    amp = 0.18
    c = curve_from_height(
        16, ELL,
        lambda x: amp * np.sin(2 * np.pi * x) ** 2,
        lambda x: 2 * np.pi * amp * np.sin(4 * np.pi * x),
        lambda x: 8 * np.pi**2 * amp * np.cos(4 * np.pi * x))
    with pytest.raises(CurveTooCloseError):
        solenoidal_extension(c, vertical_parabola(16), n_mac=16)


def test_curve_sides_cached_per_curve_and_bumps():
    c = rest_curve(8, ELL)
    s1 = curve_sides(c, 16, standard_bumps(ELL))
    s2 = curve_sides(c, 16, standard_bumps(ELL))
    s3 = curve_sides(c, 16, alternate_bumps(ELL))
    assert s1 is s2
    assert s1 is not s3
