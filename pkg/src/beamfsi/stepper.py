"""Minimizing-movements time stepping for the coupled beam-fluid system.

Each substep minimizes one functional over divergence-free velocities (the
free stream coefficients are the only unknowns):

  G(u) = elastic(eta_new) + sqrt(delta0)/2 |d^3 eta_new|^2
       + eps0/(2 tau) |eta_new - eta|^2_{H^2}
       + tau rho_s/(2 h) |v_s - w_s|^2_{beam}
       + tau/(2 h) sum_markers rho_0 |u(Phi) - w|^2
       + tau/2 int (mu |sym grad u|^2 + delta0 |grad lap u|^2)
       - tau int rho f . u

where eta_new is slaved to u through the nodal jet composition
eta_new = eta + tau * (2-jet of u o eta) and v_s = (eta_new - eta)/tau.
Gravity acts on the fluids only; the beam feels it through the density
contrast across the interface.

The delayed fields w_s, w replay the previous window phase for phase: the
record keeps the N+1 substep-boundary velocity samples of the last window
(solid in the beam coordinate, fluid along the same material markers), and
substep k of the current window averages samples k and k+1 (trapezoid of a
piecewise-linear-in-time record; the first window replays the initial
velocity).  Markers persist across windows, which realizes the relabeling
of the record to the new window's material frame exactly: sample and
unknown are always evaluated on the same particle.  Inertia is therefore
time-delayed by one window, which makes each substep a convex-plus-elastic
minimization.

The flow map restarts at identity each window: the marker positions at the
window start become the labels, and the per-window gradient accumulator
K = sum tau * Lip(u)^2 drives the monitors det grad Phi in
[exp(-4 tau K), exp(2 tau K)] and neighbor stretch <= exp(sqrt(K h)),
with a warning (never an abort) once tau * K exceeds 1/4.

The minimizer never loses to the zero velocity: G(u*) <= G(0) is enforced by
starting from the better of (warm start, 0) and falling back, so the
telescoped energy inequality holds with nonpositive margin by construction.

Conditioning: the hyperviscous term spreads the spectrum like the fourth
power of the lattice size, so L-BFGS runs in a preconditioned variable
y = R c with R the Cholesky factor of a constant-coefficient proxy of the
fluid quadratic (Kronecker sums of 1D spline Grams).  The proxy drops the
indefinite cross terms, which keeps it spectrally equivalent on the clamped
space; it only changes iteration counts, never the minimizer.
"""

from __future__ import annotations

import collections
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cholesky, solve_triangular

from .beam_energy import (
    ElasticParams,
    elastic_energy,
    elastic_gradient_dofs,
    third_derivative_norm_sq,
)
from .fluid import (
    FluidGrid,
    StreamField,
    _cardinal_at,
    boundary_max_speed,
    divergence_two_ways,
    eps_sq_from_mixed,
    gradlap_sq_from_mixed,
    interpolate_stream,
)
from .geometry import (
    BeamCurve,
    beam_gauss,
    classify_point,
    eval_curve,
    eval_on_gauss,
    min_boundary_distance,
    min_slope,
    scatter_gauss,
)

__all__ = [
    "SchemeParams",
    "Stepper",
    "RunResult",
    "lbfgs_minimize",
    "LbfgsResult",
    "CollisionError",
    "displacement_envelope",
]


class CollisionError(RuntimeError):
    """The curve reached a wall or itself; the scheme cannot continue."""


@dataclass(frozen=True)
class SchemeParams:
    """Time scheme constants; tau = window / substeps, delta0 = window^alpha0."""

    window: float = 0.08
    substeps: int = 16
    rho_solid: float = 1.0
    rho_plus: float = 1.0
    rho_minus: float = 1.0
    mu_plus: float = 1.0
    mu_minus: float = 1.0
    alpha0: float = 0.5
    eps0: float = 0.0
    gravity: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.window <= 0 or self.substeps < 1:
            raise ValueError("window must be positive with at least 1 substep")
        if min(self.rho_solid, self.rho_plus, self.rho_minus) <= 0:
            raise ValueError("densities must be positive")
        if min(self.mu_plus, self.mu_minus) <= 0:
            raise ValueError("viscosities must be positive")
        if not 0 < self.alpha0 <= 1 or self.eps0 < 0:
            raise ValueError("need 0 < alpha0 <= 1 and eps0 >= 0")

    @property
    def tau(self) -> float:
        return self.window / self.substeps

    @property
    def delta0(self) -> float:
        return self.window**self.alpha0


# --- quasi-Newton minimizer -------------------------------------------------

@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    evals: int
    converged: bool


def lbfgs_minimize(fun, x0: np.ndarray, tol: float = 1e-6, max_iter: int = 300,
                   memory: int = 10, armijo: float = 1e-4,
                   max_backtracks: int = 30) -> LbfgsResult:
    """Two-loop L-BFGS with Armijo backtracking.

    fun(x) -> (value, gradient); value +inf marks infeasible trial points and
    makes the line search shrink.  Fully deterministic.  The Armijo test
    carries a roundoff allowance so the search does not thrash once decreases
    fall below the precision of the value; the caller must not rely on strict
    monotonicity tighter than that allowance.
    """
    x = np.asarray(x0, float).copy()
    f, g = fun(x)
    evals = 1
    if not np.isfinite(f):
        raise ValueError("minimization must start from a feasible point")
    pairs: collections.deque = collections.deque(maxlen=memory)
    it = 0
    converged = False
    while it < max_iter:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol * (1.0 + abs(f)):
            converged = True
            break
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= float(s @ y) / float(y @ y)
        else:
            q /= 1.0 + gnorm
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        d = -q
        slope = float(g @ d)
        if slope >= 0.0:
            d = -g
            slope = -float(g @ g)
        step = 1.0
        slack = 1e-13 * (1.0 + abs(f))
        accepted = False
        for _ in range(max_backtracks):
            xt = x + step * d
            ft, gt = fun(xt)
            evals += 1
            if np.isfinite(ft) and ft <= f + armijo * step * slope + slack:
                accepted = True
                break
            step *= 0.5
        if not accepted or ft >= f:      # no true decrease left: stop
            break
        s_vec = xt - x
        y_vec = gt - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * (np.linalg.norm(s_vec) * np.linalg.norm(y_vec) + 1e-300):
            pairs.append((s_vec, y_vec, 1.0 / sy))
        x, f, g = xt, ft, gt
        it += 1
    return LbfgsResult(x, f, float(np.max(np.abs(g))), it, evals, converged)


# --- batched basis tables ---------------------------------------------------

_GAUSS_ORDERS = ((1, 1), (2, 0), (0, 2), (3, 1), (1, 3), (2, 2), (0, 1), (1, 0))
_MARKER_ORDERS = ((0, 1), (1, 0))
_NODE_ORDERS = ((0, 1), (1, 0), (1, 1), (0, 2), (2, 0),
                (2, 1), (1, 2), (0, 3), (3, 0))


class _StackedTables:
    """Several mixed orders over one fixed point set, evaluated in one pass.

    The 16 basis products per point and order are fused into one table, so
    evaluation is a batched (orders x 16) matvec against the gathered
    coefficient patch; scatter is the exact adjoint of that contraction,
    accumulated with bincount over flattened coefficient indices.
    """

    def __init__(self, tables, orders):
        self.rows = tables.rows
        self.cols = tables.cols
        p = self.rows.shape[0]
        prod = np.empty((p, len(orders), 16))
        for k, (a, b) in enumerate(orders):
            prod[:, k, :] = (tables.wx[a][:, :, None]
                             * tables.wy[b][:, None, :]).reshape(p, 16)
        self.prod = prod
        stride = tables.grid.n + 3
        self.flat = (self.rows[:, :, None] * stride
                     + self.cols[:, None, :]).reshape(p, 16)
        self.size = stride * stride

    def eval_all(self, full: np.ndarray) -> np.ndarray:
        patch = full[self.rows[:, :, None],
                     self.cols[:, None, :]].reshape(-1, 16)
        return np.matmul(self.prod, patch[:, :, None])[:, :, 0].T

    def scatter_all(self, weights: np.ndarray, out: np.ndarray):
        contrib = np.matmul(weights.T[:, None, :], self.prod)[:, 0, :]
        out += np.bincount(self.flat.ravel(), weights=contrib.ravel(),
                           minlength=self.size).reshape(out.shape)


class _StackedCellTables(_StackedTables):
    """Cell-quadrature variant: every Gauss point of a cell touches the same
    4x4 coefficient block, so the patch is gathered per cell and the adjoint
    reduces to shifted block adds."""

    def __init__(self, tables, orders, n: int, q: int):
        super().__init__(tables, orders)
        self.n, self.q = n, q
        o = len(orders)
        # regroup the product table cell-major: p = (cx, gx, cy, gy)
        pc = self.prod.reshape(n, q, n, q, o, 16) \
            .transpose(0, 2, 1, 3, 4, 5).reshape(n * n, q * q * o, 16)
        self.prod_cells = np.ascontiguousarray(pc)
        r4 = np.arange(n)[:, None] + np.arange(4)
        self.block_rows = r4[:, None, :, None]
        self.block_cols = r4[None, :, None, :]

    def eval_all(self, full: np.ndarray) -> np.ndarray:
        n, q = self.n, self.q
        o = self.prod.shape[1]
        blocks = full[self.block_rows, self.block_cols].reshape(n * n, 16, 1)
        vals = np.matmul(self.prod_cells, blocks)[:, :, 0]
        return np.ascontiguousarray(
            vals.reshape(n, n, q, q, o).transpose(4, 0, 2, 1, 3)
        ).reshape(o, -1)

    def scatter_all(self, weights: np.ndarray, out: np.ndarray):
        n, q = self.n, self.q
        o = weights.shape[0]
        wc = np.ascontiguousarray(
            weights.reshape(o, n, q, n, q).transpose(1, 3, 2, 4, 0)
        ).reshape(n * n, 1, q * q * o)
        blocks = np.matmul(wc, self.prod_cells)[:, 0, :].reshape(n, n, 4, 4)
        for oi in range(4):
            for oj in range(4):
                out[oi:oi + n, oj:oj + n] += blocks[:, :, oi, oj]


# --- 1D spline Grams for the preconditioner --------------------------------

def _line_gram(n: int, delta: float, d: int) -> np.ndarray:
    """Gram matrix int b_i^(d) b_j^(d) on the full 1D coefficient line."""
    gpts, gw = leggauss(4)
    t = 0.5 * (gpts + 1.0)
    w = 0.5 * gw * delta
    vals = _cardinal_at(t, d) / delta**d        # (4 pts, 4 basis)
    local = np.einsum("p,pi,pj->ij", w, vals, vals)
    out = np.zeros((n + 3, n + 3))
    for s in range(n):
        out[s:s + 4, s:s + 4] += local
    return out


@dataclass
class RunResult:
    rows: list
    energy: dict
    curve: BeamCurve
    stream: StreamField


def displacement_envelope(rows) -> np.ndarray:
    """Certified sup-norm envelope for the vertical interface displacement.

    v(t) = eta_2(t) - eta_2(0) vanishes at both clamped ends, so
    |v|_inf^2 <= 2 |v|_L2 |dx v|_L2.  Bounding each factor by Cauchy-Schwarz
    in time over the piecewise-constant rate gives, at the end of row k,

        |v|_inf <= sqrt(2) sqrt(t_k) (D0_k D1_k)^(1/4),

    with D0 = sum tau |dt eta_2|^2_L2 and D1 = sum tau |dx dt eta_2|^2_L2
    read off the ledger columns.  Every step of the chain is a genuine
    inequality of the discrete trajectory, so the trajectory must respect
    the envelope wherever it stays within the clearance budget; this is the
    minimal-existence-time certificate.
    """
    tau = np.array([r["tau"] for r in rows])
    t = np.cumsum(tau)
    d0 = np.cumsum(tau * np.array([r["rate_sq_y"] for r in rows]))
    d1 = np.cumsum(tau * np.array([r["rate_sq_dxy"] for r in rows]))
    return np.sqrt(2.0 * t) * (d0 * d1) ** 0.25


class Stepper:
    """Advances the coupled state one minimization substep at a time."""

    def __init__(self, elastic: ElasticParams, scheme: SchemeParams,
                 curve0: BeamCurve, grid: FluidGrid,
                 stream0: StreamField | None = None, marker_factor: int = 2,
                 initial_solid_velocity=None, gauss_order: int = 3,
                 bfgs_tol: float = 1e-6, bfgs_max_iter: int = 300):
        self.elastic = elastic
        self.scheme = scheme
        self.grid = grid
        self.bfgs_tol = bfgs_tol
        self.bfgs_max_iter = bfgs_max_iter
        ell = curve0.ell
        if abs(grid.ell - ell) > 1e-12:
            raise ValueError("curve and fluid grid live on different boxes")
        if min_slope(curve0) <= 1e-6:
            raise ValueError("initial curve is too close to losing injectivity")
        if min_boundary_distance(curve0).collision:
            raise ValueError("initial curve touches a wall")
        self.curve = curve0
        self.stream = stream0 if stream0 is not None else StreamField.zero(grid)

        # fixed quadrature over the box and its basis tables
        self._pts_g, self._w_g = grid.cell_gauss(gauss_order)
        self._gstack = _StackedCellTables(
            grid.tables(self._pts_g, max_order=3), _GAUSS_ORDERS,
            grid.n, gauss_order)

        # beam quadrature and the dense parameter sample for labeling
        m = curve0.elements
        _, self._w_b = beam_gauss(m, ell)
        self._label_s = np.linspace(0.0, ell, 16 * m + 1)

        # marker lattice (includes wall markers, which never move)
        mm = marker_factor * grid.n
        s = np.linspace(0.0, ell, mm + 1)
        X, Y = np.meshgrid(s, s - ell / 2.0, indexing="ij")
        self._marker_shape = (mm + 1, mm + 1)
        self._marker_dx = ell / mm
        self.markers = np.stack([X.ravel(), Y.ravel()], axis=1)
        self._markers0 = self.markers.copy()
        lab0 = classify_point(curve0, self.markers, 0.0)
        self._rho0 = np.where(lab0 > 0, scheme.rho_plus, scheme.rho_minus)
        self._marker_mass = self._marker_dx**2

        # previous-window velocity record: N+1 substep-boundary samples; the
        # first window replays the initial velocity at every phase
        n_sub = scheme.substeps
        u0_markers = self.stream.velocity(self.markers)
        self._prev_fluid = np.repeat(u0_markers[None], n_sub + 1, axis=0)
        if initial_solid_velocity is None:
            v0 = np.zeros((len(self._w_b), 2))
        else:
            xg, _ = beam_gauss(m, ell)
            v0 = np.asarray(initial_solid_velocity(xg), float)
        self._prev_solid = np.repeat(v0[None], n_sub + 1, axis=0)
        self._cur_fluid: list = []
        self._cur_solid: list = []
        self.initial_fluid_kinetic = 0.5 * self._marker_mass * float(
            np.sum(self._rho0 * np.sum(u0_markers**2, axis=1)))
        self.initial_solid_kinetic = 0.5 * scheme.rho_solid * float(
            np.sum(self._w_b * np.sum(v0**2, axis=1)))

        self.t = 0.0
        self.substep_index = 0
        self.kappa = 0.0                      # per-window sum tau * Lip(u)^2
        self._window_labels = self.markers.copy()
        self._warm = self.stream.free.ravel().copy()
        self.rows: list = []
        self.keep_snapshots = False
        self.snapshots: list = []

        # Euler-Lagrange probe directions: two fixed interpolated vortices
        def probe_a(x, y):
            yy = (y + ell / 2.0) / ell
            return np.sin(2 * np.pi * x / ell) ** 2 * np.sin(np.pi * yy) ** 2

        def probe_b(x, y):
            yy = (y + ell / 2.0) / ell
            return np.sin(np.pi * x / ell) ** 2 * np.sin(2 * np.pi * yy) ** 2

        probes = []
        for fn in (probe_a, probe_b):
            d = interpolate_stream(grid, fn).free.ravel()
            probes.append(d / np.linalg.norm(d))
        self._probes = probes

        self._chol = self._proxy_cholesky()
        b0 = elastic_energy(curve0, elastic)
        self.initial_energy = (b0.total + 0.5 * np.sqrt(scheme.delta0)
                               * third_derivative_norm_sq(curve0))
        self._sums = collections.defaultdict(float)
        self._worst_margin = -np.inf

    @property
    def marker_density(self) -> np.ndarray:
        """Material density carried by each marker, assigned at start."""
        return self._rho0

    @property
    def marker_mass(self) -> float:
        """Quadrature weight of a single marker."""
        return self._marker_mass

    # --- preconditioner ---------------------------------------------------

    def _proxy_cholesky(self) -> np.ndarray:
        g = self.grid
        sc = self.scheme
        grams = [_line_gram(g.n, g.delta, d) for d in range(4)]
        e = g.embed
        gh = [e.T @ G @ e for G in grams]
        tau, h = sc.tau, sc.window
        mu_bar = max(sc.mu_plus, sc.mu_minus)
        rho_bar = max(sc.rho_plus, sc.rho_minus)
        p = (0.5 * tau * sc.delta0 * (2 * np.kron(gh[3], gh[1])
                                      + 2 * np.kron(gh[1], gh[3])
                                      + 2 * np.kron(gh[2], gh[2]))
             + 0.5 * tau * mu_bar * (2 * np.kron(gh[1], gh[1])
                                     + 0.5 * np.kron(gh[2], gh[0])
                                     + 0.5 * np.kron(gh[0], gh[2]))
             + 0.5 * tau / h * rho_bar * (np.kron(gh[1], gh[0])
                                          + np.kron(gh[0], gh[1])))
        return cholesky(p, lower=False)

    # --- per-substep frozen data ------------------------------------------

    def _prepare(self):
        sc = self.scheme
        c = self.curve
        self._dofs_k = c.dofs
        nodes_pts = c.dofs[:, 0, :]
        self._tangent = c.dofs[:, 1, :]
        self._curvature = c.dofs[:, 2, :]
        self._nstack = _StackedTables(
            self.grid.tables(nodes_pts, max_order=3), _NODE_ORDERS)
        self._mstack = _StackedTables(
            self.grid.tables(self.markers, max_order=1), _MARKER_ORDERS)
        above = self._labels_above(c)
        self._mu_g = np.where(above, sc.mu_plus, sc.mu_minus)
        self._rho_g = np.where(above, sc.rho_plus, sc.rho_minus)
        phase = self.substep_index % sc.substeps
        self._w_solid = 0.5 * (self._prev_solid[phase]
                               + self._prev_solid[phase + 1])
        self._w_fluid = 0.5 * (self._prev_fluid[phase]
                               + self._prev_fluid[phase + 1])
        self._f_vec = np.asarray(sc.gravity, float)
        self._f_vec.setflags(write=False)
        self._delayed_kinetic = (
            0.5 * sc.tau / sc.window * (
                sc.rho_solid * float(np.sum(
                    self._w_b * np.sum(self._w_solid**2, axis=1)))
                + self._marker_mass * float(np.sum(
                    self._rho0 * np.sum(self._w_fluid**2, axis=1)))))

    def _labels_above(self, curve: BeamCurve) -> np.ndarray:
        """Which quadrature points lie above the curve.

        Same rule as classify_point (vertical offset at the matching
        parameter, ties count as below), with the horizontal inverse taken
        from a dense monotone sample instead of a per-point Newton solve;
        the only difference is the labeling of an O(sample^2) sliver along
        the interface, which the scheme owns either way.
        """
        s = self._label_s
        e1 = eval_curve(curve, s, 0)
        x_star = np.interp(self._pts_g[:, 0], e1[:, 0], s)
        height = eval_curve(curve, x_star, 0)[:, 1]
        return self._pts_g[:, 1] - height > 0.0

    # --- candidate curve through the jet composition ----------------------

    def _trace_jets(self, full: np.ndarray):
        """u, grad u . t, and the chain-rule second jet at the beam nodes."""
        p01, p10, p11, p02, p20, p21, p12, p03, p30 = \
            self._nstack.eval_all(full)
        t1, t2 = self._tangent[:, 0], self._tangent[:, 1]
        k1, k2 = self._curvature[:, 0], self._curvature[:, 1]
        jet = np.empty_like(self._dofs_k)
        jet[:, 0, 0] = p01
        jet[:, 0, 1] = -p10
        jet[:, 1, 0] = p11 * t1 + p02 * t2
        jet[:, 1, 1] = -(p20 * t1 + p11 * t2)
        jet[:, 2, 0] = (p21 * t1**2 + 2.0 * p12 * t1 * t2 + p03 * t2**2
                        + p11 * k1 + p02 * k2)
        jet[:, 2, 1] = -(p30 * t1**2 + 2.0 * p21 * t1 * t2 + p12 * t2**2
                         + p20 * k1 + p11 * k2)
        # clamped ends: value and slope increments are projected out (the
        # stream vanishes there, but its normal derivative need not)
        jet[0, 0:2, :] = 0.0
        jet[-1, 0:2, :] = 0.0
        return jet

    def _trace_jets_adjoint(self, cot: np.ndarray, out: np.ndarray):
        """Scatter a cotangent on the candidate jets back onto full coeffs."""
        cot = cot.copy()
        cot[0, 0:2, :] = 0.0
        cot[-1, 0:2, :] = 0.0
        t1, t2 = self._tangent[:, 0], self._tangent[:, 1]
        k1, k2 = self._curvature[:, 0], self._curvature[:, 1]
        a1, a2 = cot[:, 0, 0], cot[:, 0, 1]
        b1, b2 = cot[:, 1, 0], cot[:, 1, 1]
        c1, c2 = cot[:, 2, 0], cot[:, 2, 1]
        w = np.stack([
            a1,                                        # (0, 1)
            -a2,                                       # (1, 0)
            b1 * t1 - b2 * t2 + c1 * k1 - c2 * k2,     # (1, 1)
            b1 * t2 + c1 * k2,                         # (0, 2)
            -b2 * t1 - c2 * k1,                        # (2, 0)
            c1 * t1**2 - 2.0 * c2 * t1 * t2,           # (2, 1)
            2.0 * c1 * t1 * t2 - c2 * t2**2,           # (1, 2)
            c1 * t2**2,                                # (0, 3)
            -c2 * t1**2,                               # (3, 0)
        ])
        self._nstack.scatter_all(w, out)

    # --- the functional and its gradient ----------------------------------

    def _assemble(self, c_flat: np.ndarray):
        """Value, free-coefficient gradient, and named parts of G."""
        sc = self.scheme
        tau, h = sc.tau, sc.window
        grid = self.grid
        full = grid.full_coeffs(c_flat)

        jet = self._trace_jets(full)
        cand_dofs = self._dofs_k + tau * jet
        cand = BeamCurve(self.curve.ell, cand_dofs)
        s_min = min_slope(cand)
        half = 0.5 * self.curve.ell
        if s_min <= 1e-6 or np.max(np.abs(cand_dofs[:, 0, 1])) >= half:
            return np.inf, None, None

        parts = {}
        m, ell = self.curve.elements, self.curve.ell
        breakdown = elastic_energy(cand, self.elastic)
        parts["elastic_stretch"] = breakdown.stretch
        parts["elastic_barrier"] = breakdown.barrier
        parts["elastic_bend_h"] = breakdown.bend_horizontal
        parts["elastic_bend_v"] = breakdown.bend_vertical
        parts["elastic"] = breakdown.total
        cot_dofs = elastic_gradient_dofs(cand, self.elastic)

        sqd = np.sqrt(sc.delta0)
        third = eval_on_gauss(cand, 3)
        parts["reg_third"] = 0.5 * sqd * float(
            np.sum(self._w_b * np.sum(third**2, axis=1)))
        cot_dofs += scatter_gauss(m, ell, 3, sqd * self._w_b[:, None] * third)

        diff = BeamCurve(ell, cand_dofs - self._dofs_k)
        if sc.eps0 > 0.0:
            # rate regularizer acts on the third derivative of the increment
            v3 = eval_on_gauss(diff, 3)
            parts["eps0_term"] = 0.5 * sc.eps0 / tau * float(
                np.sum(self._w_b * np.sum(v3**2, axis=1)))
            cot_dofs += scatter_gauss(
                m, ell, 3, (sc.eps0 / tau) * self._w_b[:, None] * v3)
        else:
            parts["eps0_term"] = 0.0

        vs = eval_on_gauss(diff, 0) / tau
        dv = vs - self._w_solid
        parts["solid_inertia"] = (0.5 * tau * sc.rho_solid / h
                                  * float(np.sum(self._w_b * np.sum(dv**2, 1))))
        cot_dofs += scatter_gauss(
            m, ell, 0, (sc.rho_solid / h) * self._w_b[:, None] * dv)

        parts["solid_kinetic"] = 0.5 * sc.rho_solid * float(
            np.sum(self._w_b * np.sum(vs**2, axis=1)))
        parts["rate_sq_y"] = float(np.sum(self._w_b * vs[:, 1] ** 2))
        dvs = eval_on_gauss(diff, 1) / tau
        parts["rate_sq_dxy"] = float(np.sum(self._w_b * dvs[:, 1] ** 2))

        # fluid terms at the cell quadrature
        p11, p20, p02, p31, p13, p22, p01, p10 = self._gstack.eval_all(full)
        u1, u2 = p01, -p10
        w = self._w_g
        eps_sq = eps_sq_from_mixed(p11, p20, p02)
        gl_sq = gradlap_sq_from_mixed(p31, p13, p22)
        parts["diss_visc"] = 0.5 * tau * float(np.sum(w * self._mu_g * eps_sq))
        parts["diss_hyper"] = 0.5 * tau * sc.delta0 * float(np.sum(w * gl_sq))
        f1, f2 = self._f_vec
        parts["work_fluid"] = tau * float(
            np.sum(w * self._rho_g * (f1 * u1 + f2 * u2)))

        # delayed fluid inertia at the markers
        mv = self._mstack.eval_all(full)
        um = np.stack([mv[0], -mv[1]], 1)
        du = um - self._w_fluid
        parts["fluid_inertia"] = (0.5 * tau / h * self._marker_mass
                                  * float(np.sum(self._rho0 * np.sum(du**2, 1))))
        parts["fluid_kinetic"] = 0.5 * self._marker_mass * float(
            np.sum(self._rho0 * np.sum(um**2, axis=1)))

        value = (parts["elastic"] + parts["reg_third"] + parts["eps0_term"]
                 + parts["solid_inertia"] + parts["fluid_inertia"]
                 + parts["diss_visc"] + parts["diss_hyper"]
                 - parts["work_fluid"])

        # gradient: beam chain, then the fluid quadrature and marker terms
        out = np.zeros((grid.n + 3, grid.n + 3))
        self._trace_jets_adjoint(tau * cot_dofs, out)
        tmu = 0.5 * tau * self._mu_g * w
        thy = 0.5 * tau * sc.delta0 * w
        sxy = tau * w * self._rho_g
        gl_cot = thy * 4.0 * (p31 + p13)
        gw = np.stack([
            tmu * 4.0 * p11,            # (1, 1)
            tmu * (p20 - p02),          # (2, 0)
            tmu * (p02 - p20),          # (0, 2)
            gl_cot,                     # (3, 1)
            gl_cot,                     # (1, 3)
            thy * 4.0 * p22,            # (2, 2)
            -sxy * f1,                  # (0, 1)
            sxy * f2,                   # (1, 0)
        ])
        self._gstack.scatter_all(gw, out)
        wm = (tau / h) * self._marker_mass * self._rho0
        self._mstack.scatter_all(
            np.stack([wm * du[:, 0], -wm * du[:, 1]]), out)
        grad = grid.scatter_full_to_free(out).ravel()

        parts["_um"] = um
        parts["_cand"] = cand
        parts["_lip"] = max(float(np.max(np.abs(p11))),
                            float(np.max(np.abs(p20))),
                            float(np.max(np.abs(p02))))
        return value, grad, parts

    # --- one substep ------------------------------------------------------

    def substep(self) -> dict:
        sc = self.scheme
        tau = sc.tau
        self._prepare()

        zero = np.zeros_like(self._warm)
        g_zero, _, _ = self._assemble(zero)
        r = self._chol

        def fun(y):
            c = solve_triangular(r, y, lower=False, check_finite=False)
            val, grad, _ = self._assemble(c)
            if not np.isfinite(val):
                return np.inf, None
            return val, solve_triangular(r.T, grad, lower=True,
                                         check_finite=False)

        start = self._warm
        g_warm, _, _ = self._assemble(start)
        if not np.isfinite(g_warm) or g_zero < g_warm:
            start = zero
        res = lbfgs_minimize(fun, r @ start, tol=self.bfgs_tol,
                             max_iter=self.bfgs_max_iter)
        c_min = solve_triangular(r, res.x, lower=False, check_finite=False)
        value, grad, parts = self._assemble(c_min)
        if value > g_zero:                    # never lose to standing still
            c_min = zero
            value, grad, parts = self._assemble(zero)
        margin = value - g_zero

        el_res = max(abs(float(grad @ d)) for d in self._probes) / (1 + abs(value))

        # advance the state
        new_curve: BeamCurve = parts["_cand"]
        new_stream = StreamField(self.grid, c_min.reshape(self.grid.free_shape))
        um = parts["_um"]
        vs = (new_curve.dofs - self._dofs_k)
        vs_gauss = eval_on_gauss(BeamCurve(self.curve.ell, vs), 0) / tau
        if self.keep_snapshots:
            self.snapshots.append({
                "substep": self.substep_index,
                "t_end": self.t + tau,
                "dofs_k": self._dofs_k.copy(),
                "dofs_k1": new_curve.dofs.copy(),
                "stream_free": c_min.reshape(self.grid.free_shape).copy(),
                "markers_pre": self.markers.copy(),
                "w_fluid": self._w_fluid.copy(),
                "w_solid": self._w_solid.copy(),
            })
        self._cur_fluid.append(um.copy())
        self._cur_solid.append(vs_gauss)
        self.markers = self.markers + tau * um
        lip = parts["_lip"]
        self.kappa += tau * lip * lip
        if tau * self.kappa > 0.25:
            warnings.warn(
                f"substep {self.substep_index}: tau * K = "
                f"{tau * self.kappa:.3f} exceeds 1/4; the flow-map envelopes "
                "are outside their guaranteed regime", stacklevel=2)
        self.curve = new_curve
        self.stream = new_stream
        self._warm = c_min.copy()
        self.t += tau
        self.substep_index += 1

        row = self._diagnostics_row(value, g_zero, margin, res, el_res, parts)
        self.rows.append(row)
        for key in ("diss_visc", "diss_hyper", "solid_inertia", "fluid_inertia",
                    "eps0_term", "work_fluid"):
            self._sums[key] += parts[key]
        self._sums["delayed_kinetic"] += self._delayed_kinetic
        self._sums["margin"] += margin
        self._worst_margin = max(self._worst_margin, margin)

        # window boundary: the finished record becomes the delayed data and
        # the flow map restarts at identity from the current positions
        if self.substep_index % sc.substeps == 0:
            self._prev_fluid = np.concatenate(
                [self._prev_fluid[-1:], np.stack(self._cur_fluid)])
            self._prev_solid = np.concatenate(
                [self._prev_solid[-1:], np.stack(self._cur_solid)])
            self._cur_fluid = []
            self._cur_solid = []
            self._window_labels = self.markers.copy()
            self.kappa = 0.0

        if row["collision"]:
            raise CollisionError(
                f"contact at t = {self.t:.4f}: clearance "
                f"{row['wall_clearance']:.3e}, self gap {row['self_gap']:.3e}")
        return row

    def _flow_map_checks(self):
        """Per-window flow-map monitors against the measured K.

        The window's labels are the marker positions at its start, so the
        Jacobian of positions with respect to labels chains two logical-grid
        central differences: grad_label Phi = (grad_i positions)
        (grad_i labels)^{-1}, and its determinant is the quotient of the two
        2x2 determinants.  Bounds: det in [exp(-4 tau K), exp(2 tau K)]
        with an absolute 1e-3 measurement allowance for the finite
        differencing, and neighbor stretch within exp(sqrt(K h)) times a
        1.05 discretization allowance.
        """
        shape = self._marker_shape + (2,)
        phi = self.markers.reshape(shape)
        lab = self._window_labels.reshape(shape)
        px = 0.5 * (phi[2:, 1:-1] - phi[:-2, 1:-1])
        py = 0.5 * (phi[1:-1, 2:] - phi[1:-1, :-2])
        lx = 0.5 * (lab[2:, 1:-1] - lab[:-2, 1:-1])
        ly = 0.5 * (lab[1:-1, 2:] - lab[1:-1, :-2])
        det_p = px[..., 0] * py[..., 1] - px[..., 1] * py[..., 0]
        det_l = lx[..., 0] * ly[..., 1] - lx[..., 1] * ly[..., 0]
        det = det_p / det_l
        tk = self.scheme.tau * self.kappa
        det_ok = bool(det.min() >= np.exp(-4.0 * tk) - 1e-3
                      and det.max() <= np.exp(2.0 * tk) + 1e-3)
        ratios = np.concatenate([
            (np.linalg.norm(np.diff(phi, axis=0), axis=-1)
             / np.linalg.norm(np.diff(lab, axis=0), axis=-1)).ravel(),
            (np.linalg.norm(np.diff(phi, axis=1), axis=-1)
             / np.linalg.norm(np.diff(lab, axis=1), axis=-1)).ravel(),
        ])
        lip_env = np.exp(np.sqrt(self.kappa * self.scheme.window))
        lip_ok = bool(ratios.min() >= (1.0 / lip_env) / 1.05
                      and ratios.max() <= lip_env * 1.05)
        return (float(det.min()), float(det.max()), det_ok,
                float(ratios.min()), float(ratios.max()), lip_ok)

    def _diagnostics_row(self, value, g_zero, margin, res, el_res, parts):
        b = min_boundary_distance(self.curve)
        det_min, det_max, det_ok, lip_min, lip_max, lip_ok = \
            self._flow_map_checks()
        row = {
            "substep": self.substep_index,
            "window": (self.substep_index - 1) // self.scheme.substeps,
            "phase": (self.substep_index - 1) % self.scheme.substeps,
            "t": self.t,
            "tau": self.scheme.tau,
            "G_zero": g_zero,
            "G_min": value,
            "margin": margin,
            "iterations": res.iterations,
            "evals": res.evals,
            "grad_norm": res.grad_norm,
            "el_residual": el_res,
            "elastic": parts["elastic"],
            "elastic_stretch": parts["elastic_stretch"],
            "elastic_barrier": parts["elastic_barrier"],
            "elastic_bend_h": parts["elastic_bend_h"],
            "elastic_bend_v": parts["elastic_bend_v"],
            "reg_third": parts["reg_third"],
            "eps0_term": parts["eps0_term"],
            "solid_inertia": parts["solid_inertia"],
            "fluid_inertia": parts["fluid_inertia"],
            "diss_visc": parts["diss_visc"],
            "diss_hyper": parts["diss_hyper"],
            "work_fluid": parts["work_fluid"],
            "solid_kinetic": parts["solid_kinetic"],
            "fluid_kinetic": parts["fluid_kinetic"],
            "rate_sq_y": parts["rate_sq_y"],
            "rate_sq_dxy": parts["rate_sq_dxy"],
            "delayed_kinetic": self._delayed_kinetic,
            "min_slope": min_slope(self.curve),
            "wall_clearance": b.wall_clearance,
            "sup_eta2": b.sup_eta2,
            "self_gap": b.self_gap,
            "collision": bool(b.collision),
            "det_min": det_min,
            "det_max": det_max,
            "det_ok": det_ok,
            "lip_min": lip_min,
            "lip_max": lip_max,
            "lip_ok": lip_ok,
            "lip_u": parts["_lip"],
            "kappa": self.kappa,
            "tau_K": self.scheme.tau * self.kappa,
            "div_residual": divergence_two_ways(self.stream, self._pts_g[::37]),
            "boundary_speed": boundary_max_speed(self.stream),
        }
        return row

    # --- windows and energy accounting ------------------------------------

    def run_window(self) -> list:
        return [self.substep() for _ in range(self.scheme.substeps)]

    def run(self, windows: int) -> RunResult:
        for _ in range(windows):
            self.run_window()
        return RunResult(self.rows, self.energy_summary(),
                         self.curve, self.stream)

    def energy_summary(self) -> dict:
        """Telescoped energy bookkeeping over everything stepped so far.

        identity_gap checks the exact algebra: summing the per-substep
        inequalities G_min <= G(0) telescopes the elastic-plus-regularizer
        energy, so the two accountings must agree to roundoff.
        """
        s = self._sums
        b = elastic_energy(self.curve, self.elastic)
        final_total = (b.total + 0.5 * np.sqrt(self.scheme.delta0)
                       * third_derivative_norm_sq(self.curve))
        dissipation = s["diss_visc"] + s["diss_hyper"]
        positive = s["solid_inertia"] + s["fluid_inertia"] + s["eps0_term"]
        work = s["work_fluid"]
        lhs = final_total - self.initial_energy + dissipation + positive
        rhs = s["delayed_kinetic"] + work + s["margin"]
        return {
            "initial_total": self.initial_energy,
            "final_total": final_total,
            "dissipation": dissipation,
            "delayed_positive": positive,
            "delayed_kinetic": s["delayed_kinetic"],
            "forcing_work": work,
            "cumulative_margin": s["margin"],
            "worst_margin": (self._worst_margin
                             if np.isfinite(self._worst_margin) else 0.0),
            "identity_gap": abs(lhs - rhs),
            "inequality_margin": lhs - (s["delayed_kinetic"] + work),
        }

    # --- checkpointing ----------------------------------------------------

    def state_dict(self) -> dict:
        nm = self.markers.shape[0]
        cur_f = (np.stack(self._cur_fluid) if self._cur_fluid
                 else np.empty((0, nm, 2)))
        cur_s = (np.stack(self._cur_solid) if self._cur_solid
                 else np.empty((0, len(self._w_b), 2)))
        return {
            "t": self.t,
            "substep_index": self.substep_index,
            "kappa": self.kappa,
            "curve_dofs": self.curve.dofs.copy(),
            "stream_free": self.stream.free.copy(),
            "markers": self.markers.copy(),
            "window_labels": self._window_labels.copy(),
            "prev_fluid": self._prev_fluid.copy(),
            "prev_solid": self._prev_solid.copy(),
            "cur_fluid": cur_f,
            "cur_solid": cur_s,
            "warm": self._warm.copy(),
            "sums": dict(self._sums),
            "worst_margin": self._worst_margin,
            "initial_energy": self.initial_energy,
            "initial_solid_kinetic": self.initial_solid_kinetic,
            "initial_fluid_kinetic": self.initial_fluid_kinetic,
        }

    def load_state(self, state: dict):
        self.t = float(state["t"])
        self.substep_index = int(state["substep_index"])
        self.kappa = float(state["kappa"])
        self.curve = BeamCurve(self.curve.ell, np.array(state["curve_dofs"]))
        self.stream = StreamField(self.grid, np.array(state["stream_free"]))
        self.markers = np.array(state["markers"])
        self._window_labels = np.array(state["window_labels"])
        self._prev_fluid = np.array(state["prev_fluid"])
        self._prev_solid = np.array(state["prev_solid"])
        self._cur_fluid = [a.copy() for a in np.array(state["cur_fluid"])]
        self._cur_solid = [a.copy() for a in np.array(state["cur_solid"])]
        self._warm = np.array(state["warm"])
        self._sums = collections.defaultdict(float, state["sums"])
        self._worst_margin = float(state["worst_margin"])
        self.initial_energy = float(state["initial_energy"])
        self.initial_solid_kinetic = float(state["initial_solid_kinetic"])
        self.initial_fluid_kinetic = float(state["initial_fluid_kinetic"])
