"""Extension of interface fields into the box with prescribed divergence.

Given a feasible curve and a field b along it (represented in the beam jet
space, vanishing at the clamped ends), the extension produces a velocity
field on the whole box that

  * equals b on the curve (up to a pinned trace tolerance),
  * vanishes on the outer boundary,
  * has discrete divergence flux * (psi_minus - psi_plus), where psi_plus
    and psi_minus are fixed unit-mass bumps in the upper and lower thirds of
    the box and flux = int dx eta ^ b is the rate the moving curve sweeps
    volume into the upper region.  The sign is forced by the divergence
    theorem: a field with trace b and zero wall values integrates to -flux
    over the upper region, so the source bump sits below and the sink above.

Construction: the naive extension b(eta_1^{-1}(z1)) * beta(z2), with beta a
vertical cutoff equal to one in a band around the midline, is divergence-
corrected separately in the region below the curve and (after a vertical
flip) above it, using the staggered-grid solver on each subgraph domain.
The correction data are the discrete divergences of the sampled naive field
with the lambda bump mass moved out, so the corrected field's cell
divergences match the target profile to solver precision by construction.
The corrections are cell-wise bilinear, so their hyperviscous jet vanishes
almost everywhere and the third-order jet of the extension is carried by the
smooth part alone.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .bogovskij import MACField, SubgraphDomain, universal_bogovskij
from .geometry import (BeamCurve, beam_gauss, curve_from_jets, eval_curve,
                       eval_on_gauss, inverse_eta1)

__all__ = [
    "lambda_of",
    "lambda_by_parts",
    "beam_field",
    "vertical_cutoff",
    "BumpPair",
    "standard_bumps",
    "alternate_bumps",
    "CurveSides",
    "ExtensionField",
    "solenoidal_extension",
    "CurveTooCloseError",
]


class CurveTooCloseError(ValueError):
    """Curve intrudes into the bump band near a wall; extension undefined."""


def lambda_of(curve: BeamCurve, b: BeamCurve) -> float:
    """Swept flux lambda = int dx eta ^ b (wedge of tangent with the field)."""
    _, w = beam_gauss(curve.elements, curve.ell)
    t = eval_on_gauss(curve, 1)
    v = eval_on_gauss(b, 0)
    return float(np.sum(w * (t[:, 0] * v[:, 1] - t[:, 1] * v[:, 0])))


def lambda_by_parts(curve: BeamCurve, b: BeamCurve) -> float:
    """The same flux by parts: -int eta ^ dx b; b vanishes at the ends."""
    _, w = beam_gauss(curve.elements, curve.ell)
    e = eval_on_gauss(curve, 0)
    db = eval_on_gauss(b, 1)
    return float(-np.sum(w * (e[:, 0] * db[:, 1] - e[:, 1] * db[:, 0])))


def beam_field(elements: int, ell: float, f, f1, f2) -> BeamCurve:
    """Interface field in the beam jet space from callables (vector-valued)."""
    return curve_from_jets(elements, ell, f, f1, f2)


# --- vertical cutoff -------------------------------------------------------

def _smoothstep(t, d):
    """Quintic smoothstep and derivatives, clamped outside [0, 1]."""
    t = np.asarray(t, float)
    inside = (t > 0.0) & (t < 1.0)
    tc = np.clip(t, 0.0, 1.0)
    if d == 0:
        return np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0,
                        tc**3 * (10.0 + tc * (-15.0 + 6.0 * tc))))
    if d == 1:
        v = 30.0 * tc**2 * (1.0 - tc) ** 2
    elif d == 2:
        v = 60.0 * tc * (1.0 - tc) * (1.0 - 2.0 * tc)
    elif d == 3:
        v = 60.0 * (1.0 - 6.0 * tc + 6.0 * tc**2)
    else:
        raise ValueError("cutoff derivatives available up to order 3")
    return np.where(inside, v, 0.0)


def vertical_cutoff(y: np.ndarray, ell: float, band: float, d: int = 0) -> np.ndarray:
    """C^2 profile in the box height: 1 on the middle band, 0 at the walls.

    Transitions live in the outer band of width `band` next to each wall;
    derivatives scale like 1/band.
    """
    y = np.asarray(y, float)
    half = ell / 2.0
    lo = (y + half) / band          # 0 at the floor, 1 at the band top
    hi = (half - y) / band
    if d == 0:
        return _smoothstep(lo, 0) * _smoothstep(hi, 0)
    # the two transition zones are disjoint (band <= ell/2), so cross terms
    # with both factors away from one never appear
    return (_smoothstep(lo, d) / band**d * _smoothstep(hi, 0)
            + _smoothstep(hi, d) * (-1.0 / band) ** d * _smoothstep(lo, 0))


def _unit_bump(t, d=0):
    """C^2 bump 140 t^3 (1-t)^3 on [0, 1] (unit integral), derivatives to 1."""
    t = np.asarray(t, float)
    inside = (t > 0.0) & (t < 1.0)
    tc = np.where(inside, t, 0.5)
    if d == 0:
        v = 140.0 * tc**3 * (1.0 - tc) ** 3
    else:
        v = 420.0 * tc**2 * (1.0 - tc) ** 2 * (1.0 - 2.0 * tc)
    return np.where(inside, v, 0.0)


@dataclass(frozen=True)
class BumpPair:
    """Unit-mass source/sink bumps in the upper and lower thirds of the box.

    x_lo/x_hi give the horizontal support; variants of these make independent
    constructions for cross-checking pressure values.
    """

    ell: float
    x_lo: float
    x_hi: float

    def plus(self, pts: np.ndarray) -> np.ndarray:
        """Analytic bump in the upper third, box coordinates."""
        ell = self.ell
        w = self.x_hi - self.x_lo
        tx = (pts[..., 0] - self.x_lo) / w
        ty = (pts[..., 1] - ell / 6.0) / (ell / 3.0)
        return _unit_bump(tx) * _unit_bump(ty) / (w * ell / 3.0)

    def minus(self, pts: np.ndarray) -> np.ndarray:
        ell = self.ell
        w = self.x_hi - self.x_lo
        tx = (pts[..., 0] - self.x_lo) / w
        ty = (-ell / 6.0 - pts[..., 1]) / (ell / 3.0)
        return _unit_bump(tx) * _unit_bump(ty) / (w * ell / 3.0)


def standard_bumps(ell: float) -> BumpPair:
    return BumpPair(ell, 0.15 * ell, 0.85 * ell)


def alternate_bumps(ell: float) -> BumpPair:
    return BumpPair(ell, 0.3 * ell, 0.95 * ell)


# --- per-curve side domains ------------------------------------------------

class CurveSides:
    """Subgraph discretizations of the two fluid regions cut by a curve.

    The lower region keeps box orientation with the floor moved to zero; the
    upper region is flipped vertically (row reversal, sign flip on the
    vertical component), which preserves discrete divergences.
    """

    def __init__(self, curve: BeamCurve, n_mac: int, bumps: BumpPair):
        self.curve = curve
        self.n_mac = n_mac
        self.bumps = bumps
        ell = curve.ell
        xs = np.linspace(0.0, ell, 8 * n_mac + 1)
        h = self._interface_height(xs)
        sup = float(np.max(np.abs(h)))
        if sup >= ell / 6.0 * 0.999:
            raise CurveTooCloseError(
                f"sup |eta_2| = {sup:.4f} reaches the bump band ell/6")
        slopes = np.abs(np.diff(h) / np.diff(xs))
        lip = max(1.0, float(slopes.max()) * 1.02)
        g_lo = ell / 2.0 + h
        g_hi = ell / 2.0 - h
        self.dom_minus = SubgraphDomain(
            ell, float(g_lo.min()), lip, float(g_lo.max()) + 1e-12, n_mac,
            graph=lambda x: ell / 2.0 + self._interface_height(x))
        self.dom_plus = SubgraphDomain(
            ell, float(g_hi.min()), lip, float(g_hi.max()) + 1e-12, n_mac,
            graph=lambda x: ell / 2.0 - self._interface_height(x))
        self._psi_grids()

    def _interface_height(self, x1):
        x1 = np.asarray(x1, float)
        par = inverse_eta1(self.curve, x1.ravel())
        return eval_curve(self.curve, par, 0)[:, 1].reshape(x1.shape)

    def _psi_grids(self):
        """Unit discrete-mass bump arrays on each side's cell lattice."""
        ell = self.curve.ell
        for name, dom, flip in (("psi_minus", self.dom_minus, False),
                                ("psi_plus", self.dom_plus, True)):
            xc, yc = dom.cell_centers()
            X, Yf = np.meshgrid(xc, yc, indexing="ij")
            ybox = ell / 2.0 - Yf if flip else Yf - ell / 2.0
            pts = np.stack([X, ybox], axis=-1)
            vals = (self.bumps.plus(pts) if flip else self.bumps.minus(pts))
            vals = vals * dom.inside
            mass = vals.sum() * dom.cell_area
            if mass <= 0.0:
                raise CurveTooCloseError("bump lost its mass on this grid")
            setattr(self, name, vals / mass)

    # sampled naive fields on each side's staggered faces, side frame

    def sample_faces(self, fn_box) -> tuple:
        """Sample a box-coordinate vector field onto both sides' MAC faces."""
        out = []
        ell = self.curve.ell
        for dom, flip in ((self.dom_minus, False), (self.dom_plus, True)):
            nx, ny, dx = dom.nx, dom.ny, dom.dx
            fx = np.arange(nx + 1) * dx
            fy = (np.arange(ny) + 0.5) * dx
            X, Y = np.meshgrid(fx, fy, indexing="ij")
            ybox = ell / 2.0 - Y if flip else Y - ell / 2.0
            vx = fn_box(np.stack([X.ravel(), ybox.ravel()], 1))[:, 0].reshape(X.shape)
            hx = (np.arange(nx) + 0.5) * dx
            hy = np.arange(ny + 1) * dx
            X2, Y2 = np.meshgrid(hx, hy, indexing="ij")
            ybox2 = ell / 2.0 - Y2 if flip else Y2 - ell / 2.0
            v2 = fn_box(np.stack([X2.ravel(), ybox2.ravel()], 1))[:, 1].reshape(X2.shape)
            vy = -v2 if flip else v2
            out.append(MACField(dx, vx, vy))
        return tuple(out)

    def sample_cells_box(self, dom, flip, fn_box_scalar) -> np.ndarray:
        ell = self.curve.ell
        xc, yc = dom.cell_centers()
        X, Yf = np.meshgrid(xc, yc, indexing="ij")
        ybox = ell / 2.0 - Yf if flip else Yf - ell / 2.0
        return fn_box_scalar(np.stack([X, ybox], axis=-1))


@functools.lru_cache(maxsize=8)
def _sides_cache(dofs_bytes: bytes, shape, ell: float, n_mac: int,
                 bumps: BumpPair) -> CurveSides:
    dofs = np.frombuffer(dofs_bytes).reshape(shape)
    return CurveSides(BeamCurve(ell, dofs.copy()), n_mac, bumps)


def curve_sides(curve: BeamCurve, n_mac: int, bumps: BumpPair) -> CurveSides:
    return _sides_cache(curve.dofs.tobytes(), curve.dofs.shape,
                        curve.ell, n_mac, bumps)


# --- the extension field ---------------------------------------------------

class ExtensionField:
    """Smooth naive extension minus the two staggered-grid corrections."""

    def __init__(self, curve: BeamCurve, b: BeamCurve, sides: CurveSides,
                 band: float, corr_minus: MACField, corr_plus: MACField,
                 flux_grid: float, flux_quad: float, naive_faces: tuple):
        self.curve = curve
        self.b = b
        self.sides = sides
        self.band = band
        self.corr_minus = corr_minus
        self.corr_plus = corr_plus
        self.flux_grid = flux_grid
        self.flux_quad = flux_quad
        self._naive_faces = naive_faces

    # smooth part: b(eta1^{-1}(z1)) * beta(z2)

    def _smooth_chain(self, pts: np.ndarray, order: int):
        """Values of b and slope chain factors at the pulled-back parameters."""
        par = inverse_eta1(self.curve, pts[:, 0])
        out = {"par": par}
        for d in range(order + 1):
            out[f"b{d}"] = eval_curve(self.b, par, d)
        jets = [eval_curve(self.curve, par, d)[:, 0] for d in range(1, min(order, 3) + 1)]
        out["s"] = jets[0] if jets else None
        if order >= 2:
            out["s1"] = jets[1]
        if order >= 3:
            out["s2"] = jets[2]
        return out

    def sample(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        ch = self._smooth_chain(pts, 0)
        beta = vertical_cutoff(pts[:, 1], self.curve.ell, self.band, 0)
        val = ch["b0"] * beta[:, None]
        val -= self._corr_sample(pts)
        return val

    def _corr_sample(self, pts: np.ndarray) -> np.ndarray:
        ell = self.curve.ell
        lo = self.corr_minus.sample(np.stack([pts[:, 0], pts[:, 1] + ell / 2.0], 1))
        hi_frame = self.corr_plus.sample(np.stack([pts[:, 0], ell / 2.0 - pts[:, 1]], 1))
        hi = np.stack([hi_frame[:, 0], -hi_frame[:, 1]], 1)
        return lo + hi

    def _corr_grad(self, pts: np.ndarray) -> np.ndarray:
        ell = self.curve.ell
        g_lo = self.corr_minus.sample_grad(
            np.stack([pts[:, 0], pts[:, 1] + ell / 2.0], 1))
        g_hi = self.corr_plus.sample_grad(
            np.stack([pts[:, 0], ell / 2.0 - pts[:, 1]], 1))
        # unflip: u1 even, u2 odd in the flip; d/dy gains a sign
        out = g_lo.copy()
        out[:, 0, 0] += g_hi[:, 0, 0]
        out[:, 0, 1] += -g_hi[:, 0, 1]
        out[:, 1, 0] += -g_hi[:, 1, 0]
        out[:, 1, 1] += g_hi[:, 1, 1]
        return out

    def grad(self, pts: np.ndarray) -> np.ndarray:
        """Jacobian d_j u_i of the extension, a.e. (bilinear corrections)."""
        pts = np.atleast_2d(np.asarray(pts, float))
        ch = self._smooth_chain(pts, 1)
        ell = self.curve.ell
        beta = vertical_cutoff(pts[:, 1], ell, self.band, 0)
        beta1 = vertical_cutoff(pts[:, 1], ell, self.band, 1)
        s = ch["s"]
        out = np.empty((len(pts), 2, 2))
        out[:, :, 0] = ch["b1"] / s[:, None] * beta[:, None]
        out[:, :, 1] = ch["b0"] * beta1[:, None]
        return out - self._corr_grad(pts)

    def gradlap(self, pts: np.ndarray) -> np.ndarray:
        """grad(laplace u) of the smooth part; corrections vanish a.e.

        With A = b''/s^2 - b' s'/s^3 (the z1-second derivative through the
        pullback chain) the laplacian is A beta + b beta'' and its gradient
        follows by one more chain step.
        """
        pts = np.atleast_2d(np.asarray(pts, float))
        ch = self._smooth_chain(pts, 3)
        ell = self.curve.ell
        s, s1, s2 = ch["s"], ch["s1"], ch["s2"]
        b0, b1, b2, b3 = ch["b0"], ch["b1"], ch["b2"], ch["b3"]
        beta = [vertical_cutoff(pts[:, 1], ell, self.band, d) for d in range(4)]
        sn = s[:, None]
        s1n, s2n = s1[:, None], s2[:, None]
        a = b2 / sn**2 - b1 * s1n / sn**3
        a1 = (b3 / sn**2 - 3.0 * b2 * s1n / sn**3
              - b1 * s2n / sn**3 + 3.0 * b1 * s1n**2 / sn**4)
        out = np.empty((len(pts), 2, 2))
        # d/dz1 (A beta + b beta'') = A'/s... A' already includes the chain
        out[:, :, 0] = (a1 / sn) * beta[0][:, None] + (b1 / sn) * beta[2][:, None]
        out[:, :, 1] = a * beta[1][:, None] + b0 * beta[3][:, None]
        return out

    # invariants

    def divergence_residual(self) -> float:
        """Max cell deviation of the discrete divergence from the target.

        Target: flux_grid * (psi_minus - psi_plus) in box orientation; both
        side solves are compared on their own lattices.
        """
        worst = 0.0
        sides = self.sides
        for naive, dom, corr, target in (
                (self._naive_faces[0], sides.dom_minus, self.corr_minus,
                 self.flux_grid * sides.psi_minus),
                (self._naive_faces[1], sides.dom_plus, self.corr_plus,
                 -self.flux_grid * sides.psi_plus)):
            resid = naive.divergence() - corr.divergence() - target
            worst = max(worst, float(np.max(np.abs(resid * dom.inside))))
        return worst

    def trace_error(self, samples: int = 200) -> float:
        x = np.linspace(0.0, self.curve.ell, samples)
        on_curve = eval_curve(self.curve, x, 0)
        want = eval_curve(self.b, x, 0)
        got = self.sample(on_curve)
        return float(np.max(np.abs(got - want)))

    def trace_tolerance(self) -> float:
        """Pinned a priori: 2 dx max |grad corr| + 1e-9 (1 + max |b|)."""
        x = np.linspace(0.0, self.curve.ell, 200)
        on_curve = eval_curve(self.curve, x, 0)
        g = self._corr_grad(on_curve)
        bmax = float(np.max(np.abs(eval_curve(self.b, x, 0))))
        dx = self.sides.dom_minus.dx
        return 2.0 * dx * float(np.max(np.abs(g))) + 1e-9 * (1.0 + bmax)

    def _wall_points(self, samples: int):
        ell = self.curve.ell
        s = np.linspace(0.0, ell, samples)
        half = ell / 2.0
        return (np.stack([s, np.full_like(s, -half)], 1),
                np.stack([s, np.full_like(s, half)], 1),
                np.stack([np.zeros_like(s), s - half], 1),
                np.stack([np.full_like(s, ell), s - half], 1))

    def wall_normal_max(self, samples: int = 200) -> float:
        """Largest normal velocity on the outer walls (exactly controlled)."""
        bottom, top, left, right = self._wall_points(samples)
        vert = max(float(np.max(np.abs(self.sample(w)[:, 1])))
                   for w in (bottom, top))
        horiz = max(float(np.max(np.abs(self.sample(w)[:, 0])))
                    for w in (left, right))
        return max(vert, horiz)

    def boundary_max(self, samples: int = 200) -> float:
        """Largest full velocity on the outer walls.

        The tangential part of the bilinear corrections is only small like
        dx |grad corr| at a wall, not exactly zero; compare against
        trace_tolerance-style bounds, not machine precision.
        """
        pts = np.concatenate(self._wall_points(samples))
        return float(np.max(np.abs(self.sample(pts))))


def solenoidal_extension(curve: BeamCurve, b: BeamCurve, n_mac: int = 48,
                         band: float | None = None,
                         bumps: BumpPair | None = None) -> ExtensionField:
    """Extend an interface field to the box with the two-bump divergence.

    b must vanish at the clamped ends (its values there, not its jets).
    """
    ell = curve.ell
    if band is None:
        band = ell / 6.0
    if bumps is None:
        bumps = standard_bumps(ell)
    b_ends = max(float(np.max(np.abs(b.dofs[0, 0]))),
                 float(np.max(np.abs(b.dofs[-1, 0]))))
    b_scale = float(np.max(np.abs(b.dofs[:, 0, :]))) + 1.0
    if b_ends > 1e-12 * b_scale:
        raise ValueError("interface field must vanish at the curve ends")
    sides = curve_sides(curve, n_mac, bumps)

    def naive(pts):
        par = inverse_eta1(curve, pts[:, 0])
        vals = eval_curve(b, par, 0)
        beta = vertical_cutoff(pts[:, 1], ell, band, 0)
        return vals * beta[:, None]

    naive_minus, naive_plus = sides.sample_faces(naive)
    div_minus = naive_minus.divergence() * sides.dom_minus.inside
    div_plus = naive_plus.divergence() * sides.dom_plus.inside
    # the upper region integrates the naive divergence to minus the swept
    # flux; moving that mass into the bumps makes both data exactly mean-free
    flux_grid = -float(div_plus.sum() * sides.dom_plus.cell_area)
    datum_plus = div_plus + flux_grid * sides.psi_plus
    datum_minus = div_minus - flux_grid * sides.psi_minus
    corr_plus = universal_bogovskij(sides.dom_plus, datum_plus)
    corr_minus = universal_bogovskij(sides.dom_minus, datum_minus)
    flux_quad = lambda_of(curve, b)
    return ExtensionField(curve, b, sides, band, corr_minus, corr_plus,
                          flux_grid, flux_quad, (naive_minus, naive_plus))
