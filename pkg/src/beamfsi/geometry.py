"""Geometry of the moving interface.

The computational box is Omega = (0, ell) x (-ell/2, ell/2).  An elastic beam
parametrized over [0, ell] divides it into an upper and a lower fluid region.
Curves live in a C^2 finite element space: quintic Hermite elements carrying
value, first and second derivative at each node, so second derivatives are
globally continuous and third derivatives exist element-wise.

Degrees of freedom are stored as an array of nodal jets with shape
(M + 1, 3, 2): node index, derivative order (0, 1, 2), component (horizontal,
vertical).  Clamped ends pin value and slope at both ends; the end curvature
jets stay free.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "RegionLabel",
    "BeamCurve",
    "BoundaryReport",
    "InfeasibleCurveError",
    "rest_curve",
    "curve_from_height",
    "eval_curve",
    "beam_gauss",
    "eval_on_gauss",
    "scatter_gauss",
    "min_slope",
    "inverse_eta1",
    "classify_point",
    "min_boundary_distance",
    "free_dof_count",
    "pack_free",
    "unpack_free",
]


class InfeasibleCurveError(ValueError):
    """Raised when an operation needs a strictly monotone first component."""


class RegionLabel(IntEnum):
    MINUS = -1      # below the curve
    INTERFACE = 0
    PLUS = 1        # above the curve


# Quintic Hermite basis on the reference element [0, 1].  Rows are the six
# shape functions (value/slope/curvature at the left node, then at the right
# node), columns are monomial coefficients 1, t, ..., t^5.
_HERMITE5 = np.array(
    [
        [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
        [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
        [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
        [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
        [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
        [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
    ]
)

# jet order of each of the six local shape functions
_JET_ORDER = np.array([0, 1, 2, 0, 1, 2])


@functools.lru_cache(maxsize=None)
def _basis_coeffs(deriv: int) -> np.ndarray:
    """Monomial coefficients of the d-th derivative of the six shape functions."""
    c = _HERMITE5.copy()
    for _ in range(deriv):
        c = c[:, 1:] * np.arange(1, c.shape[1])
    return c


def _basis_at(t: np.ndarray, deriv: int) -> np.ndarray:
    """Evaluate the reference basis derivative at local coordinates, (npts, 6)."""
    c = _basis_coeffs(deriv)
    out = np.zeros(t.shape + (6,))
    tp = np.ones_like(t)
    for k in range(c.shape[1]):
        out += tp[..., None] * c[:, k]
        tp = tp * t
    return out


@dataclass(frozen=True)
class BeamCurve:
    """Immutable C^2 beam curve over [0, ell] with (M + 1, 3, 2) nodal jets."""

    ell: float
    dofs: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dofs, dtype=float)
        if d.ndim != 3 or d.shape[1:] != (3, 2) or d.shape[0] < 2:
            raise ValueError(f"dofs must have shape (M+1, 3, 2), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "dofs", d)

    @property
    def elements(self) -> int:
        return self.dofs.shape[0] - 1

    @property
    def width(self) -> float:
        return self.ell / self.elements

    def with_dofs(self, dofs: np.ndarray) -> "BeamCurve":
        return BeamCurve(self.ell, np.array(dofs, dtype=float))


def rest_curve(elements: int, ell: float = 1.0) -> BeamCurve:
    """Flat reference configuration eta(x) = (x, 0)."""
    dofs = np.zeros((elements + 1, 3, 2))
    dofs[:, 0, 0] = np.linspace(0.0, ell, elements + 1)
    dofs[:, 1, 0] = 1.0
    return BeamCurve(ell, dofs)


def curve_from_height(elements: int, ell: float, g, g1, g2) -> BeamCurve:
    """Graph-type curve eta(x) = (x, g(x)) from height callables (g, g', g'')."""
    nodes = np.linspace(0.0, ell, elements + 1)
    dofs = np.zeros((elements + 1, 3, 2))
    dofs[:, 0, 0] = nodes
    dofs[:, 1, 0] = 1.0
    dofs[:, 0, 1] = g(nodes)
    dofs[:, 1, 1] = g1(nodes)
    dofs[:, 2, 1] = g2(nodes)
    return BeamCurve(ell, dofs)


def curve_from_jets(elements: int, ell: float, f, f1, f2) -> BeamCurve:
    """Curve from vector callables giving eta, dx eta, dxx eta at nodes.

    Each callable maps an array of x values to an (npts, 2) array.
    """
    nodes = np.linspace(0.0, ell, elements + 1)
    dofs = np.stack([np.asarray(f(nodes), float),
                     np.asarray(f1(nodes), float),
                     np.asarray(f2(nodes), float)], axis=1)
    return BeamCurve(ell, dofs)


def _locate(ell: float, elements: int, x: np.ndarray):
    delta = ell / elements
    idx = np.clip(np.floor(x / delta).astype(int), 0, elements - 1)
    t = x / delta - idx
    return idx, t, delta


def _weights(ell: float, elements: int, x: np.ndarray, deriv: int):
    """Element indices and dof-weight table (npts, 6) for one eval order."""
    idx, t, delta = _locate(ell, elements, x)
    w = _basis_at(t, deriv) * delta ** (_JET_ORDER - deriv)
    return idx, w


def eval_curve(curve: BeamCurve, x: np.ndarray, order: int = 0) -> np.ndarray:
    """Evaluate the curve (or its x-derivative of given order) at points x.

    Orders 0..3 are supported; order 3 is the element-wise third derivative,
    defined away from nodes and taken from the element containing x.
    """
    if not 0 <= order <= 3:
        raise ValueError("order must be in 0..3")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    idx, w = _weights(curve.ell, curve.elements, x, order)
    local = np.concatenate([curve.dofs[idx], curve.dofs[idx + 1]], axis=1)
    return np.einsum("pb,pbc->pc", w, local)


@functools.lru_cache(maxsize=64)
def beam_gauss(elements: int, ell: float, npts: int = 6):
    """Per-element Gauss nodes and weights over [0, ell], flattened.

    Six points per element integrate products of quintics (degree <= 11)
    exactly, which covers every polynomial pairing used by the energies.
    """
    g, gw = leggauss(npts)
    t = 0.5 * (g + 1.0)
    delta = ell / elements
    offsets = np.arange(elements)[:, None] * delta
    x = (offsets + t[None, :] * delta).ravel()
    w = np.tile(0.5 * gw * delta, elements)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@functools.lru_cache(maxsize=256)
def _gauss_tables(elements: int, ell: float, order: int, npts: int = 6):
    x, _ = beam_gauss(elements, ell, npts)
    idx, w = _weights(ell, elements, x, order)
    idx.setflags(write=False)
    w.setflags(write=False)
    return idx, w


def eval_on_gauss(curve: BeamCurve, order: int, npts: int = 6) -> np.ndarray:
    """Evaluate a derivative order at the cached per-element Gauss nodes."""
    idx, w = _gauss_tables(curve.elements, curve.ell, order, npts)
    local = np.concatenate([curve.dofs[idx], curve.dofs[idx + 1]], axis=1)
    return np.einsum("pb,pbc->pc", w, local)


def scatter_gauss(elements: int, ell: float, order: int, values: np.ndarray,
                  npts: int = 6) -> np.ndarray:
    """Adjoint of eval_on_gauss: accumulate (npts, 2) weights into dof shape."""
    idx, w = _gauss_tables(elements, ell, order, npts)
    contrib = np.einsum("pb,pc->pbc", w, values)
    out = np.zeros((elements + 1, 3, 2))
    np.add.at(out, idx, contrib[:, :3, :])
    np.add.at(out, idx + 1, contrib[:, 3:, :])
    return out


def min_slope(curve: BeamCurve) -> float:
    """Minimum of dx eta_1 over the quadrature nodes (feasibility monitor)."""
    return float(eval_on_gauss(curve, 1)[:, 0].min())


def inverse_eta1(curve: BeamCurve, z1: np.ndarray, tol: float = 1e-13,
                 max_iter: int = 80) -> np.ndarray:
    """Invert the strictly monotone first component: find x with eta_1(x) = z1.

    Newton iteration with a bisection safeguard; z1 is clipped to the exact
    range [0, ell] first (clamped ends make eta_1(0) = 0, eta_1(ell) = ell).
    """
    s_min = min_slope(curve)
    if s_min <= 0.0:
        raise InfeasibleCurveError(f"min slope {s_min:.3e} is not positive")
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    ell = curve.ell
    target = np.clip(z1, 0.0, ell)
    lo = np.zeros_like(target)
    hi = np.full_like(target, ell)
    x = target.copy()
    scale = tol * max(ell, 1.0)
    for _ in range(max_iter):
        f = eval_curve(curve, x, 0)[:, 0] - target
        if np.max(np.abs(f)) <= scale:
            break
        above = f > 0.0
        hi = np.where(above, x, hi)
        lo = np.where(above, lo, x)
        s = eval_curve(curve, x, 1)[:, 0]
        step = np.where(s > 1e-14, f / np.maximum(s, 1e-14), 0.0)
        xn = x - step
        bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
        x = np.where(bad, 0.5 * (lo + hi), xn)
    return x


def classify_point(curve: BeamCurve, points: np.ndarray, tol: float) -> np.ndarray:
    """Label points of the box against the curve: above, below, or on it.

    A point is on the interface when its vertical offset from the curve at the
    matching parameter is within tol; the caller chooses tol for its purpose
    (energy blending passes a fraction of its cell diameter).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = inverse_eta1(curve, pts[:, 0])
    height = eval_curve(curve, x, 0)[:, 1]
    diff = pts[:, 1] - height
    labels = np.where(diff > tol, int(RegionLabel.PLUS),
                      np.where(diff < -tol, int(RegionLabel.MINUS),
                               int(RegionLabel.INTERFACE)))
    return labels.astype(np.int8)


@dataclass(frozen=True)
class BoundaryReport:
    """Clearance of the curve from the horizontal walls, plus diagnostics."""

    wall_clearance: float     # min over samples of ell/2 - |eta_2|
    sup_eta2: float           # max |eta_2| over samples
    self_gap: float           # min distance between parameter-distant samples
    collision: bool


_COLLISION_TOL = 1e-9


def min_boundary_distance(curve: BeamCurve, samples_per_element: int = 16) -> BoundaryReport:
    """Vertical distance from the curve to the walls x2 = +-ell/2.

    The lateral walls are excluded: the clamped ends sit on them by
    construction.  Also reports a non-adjacent self-proximity diagnostic
    (minimum distance between samples at least ell/8 apart in parameter).
    """
    m = curve.elements
    x = np.linspace(0.0, curve.ell, m * samples_per_element + 1)
    pts = eval_curve(curve, x, 0)
    sup = float(np.max(np.abs(pts[:, 1])))
    clearance = max(curve.ell / 2.0 - sup, 0.0)
    sep = curve.ell / 8.0
    dx_param = np.abs(x[:, None] - x[None, :])
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    far = dx_param >= sep
    self_gap = float(dist[far].min()) if far.any() else float("inf")
    return BoundaryReport(
        wall_clearance=clearance,
        sup_eta2=sup,
        self_gap=self_gap,
        collision=clearance <= _COLLISION_TOL * curve.ell,
    )


# --- clamped end conditions ------------------------------------------------

def free_dof_count(elements: int) -> int:
    """Jets minus the eight pinned entries (end values and end slopes)."""
    return 6 * (elements + 1) - 8


def _free_mask(elements: int) -> np.ndarray:
    mask = np.ones((elements + 1, 3, 2), dtype=bool)
    mask[0, 0:2, :] = False
    mask[elements, 0:2, :] = False
    return mask


def pack_free(curve: BeamCurve) -> np.ndarray:
    """Extract the free jets of a clamped curve as a flat vector."""
    return curve.dofs[_free_mask(curve.elements)].copy()


def unpack_free(vec: np.ndarray, elements: int, ell: float) -> BeamCurve:
    """Rebuild a clamped curve from its free jets, restoring pinned values."""
    dofs = np.zeros((elements + 1, 3, 2))
    dofs[_free_mask(elements)] = np.asarray(vec, dtype=float)
    dofs[0, 0] = (0.0, 0.0)
    dofs[0, 1] = (1.0, 0.0)
    dofs[elements, 0] = (ell, 0.0)
    dofs[elements, 1] = (1.0, 0.0)
    return BeamCurve(ell, dofs)
