"""Divergence-free velocity fields on the box via bicubic stream functions.

Velocities are u = (d2 psi, -d1 psi) for a stream function psi represented in
a tensor product of uniform (cardinal) cubic B-splines over the box
Omega = (0, ell) x (-ell/2, ell/2).  Divergence freedom is structural; the
no-slip condition u = 0 on the whole boundary is enforced exactly through a
linear embedding of free coefficients that zeroes value and normal derivative
of psi on all four sides.  With n cells per direction this leaves an
(n - 1) x (n - 1) free coefficient grid.

Evaluation uses the closed-form polynomial pieces of the cardinal basis, so
mixed partial derivatives up to order three per direction are available
pointwise (cell-wise; at cell edges the right-hand cell is used).  Fourth
derivatives of the hyperviscous jet are evaluated a.e. in the same sense,
where the pure quartics vanish cell-wise.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "FluidGrid",
    "StreamField",
    "PointTables",
    "eps_sq_from_mixed",
    "gradlap_sq_from_mixed",
    "divergence_two_ways",
    "boundary_max_speed",
    "interpolate_stream",
    "stream_bump",
]

# cardinal cubic B-spline pieces on the unit cell: rows are the four active
# basis functions, columns monomial coefficients in the local coordinate t
_CARDINAL3 = np.array(
    [
        [1.0, -3.0, 3.0, -1.0],
        [4.0, 0.0, -6.0, 3.0],
        [1.0, 3.0, 3.0, -3.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
) / 6.0


@functools.lru_cache(maxsize=None)
def _cardinal_coeffs(deriv: int) -> np.ndarray:
    c = _CARDINAL3.copy()
    for _ in range(deriv):
        c = c[:, 1:] * np.arange(1, c.shape[1])
    return c


def _cardinal_at(t: np.ndarray, deriv: int) -> np.ndarray:
    if deriv > 3:
        return np.zeros(t.shape + (4,))
    c = _cardinal_coeffs(deriv)
    out = np.zeros(t.shape + (4,))
    tp = np.ones_like(t)
    for k in range(c.shape[1]):
        out += tp[..., None] * c[:, k]
        tp = tp * t
    return out


def _embedding(n: int) -> np.ndarray:
    """Map free coefficients c_1..c_{n-1} to the full row c_{-1}..c_{n+1}.

    The end conditions psi = psi' = 0 force c_{-1} = c_1, c_0 = -c_1 / 2 and
    the mirror relations at the right end, killing two coefficients per side.
    """
    e = np.zeros((n + 3, n - 1))
    e[0, 0] = 1.0
    e[1, 0] = -0.5
    for i in range(n - 1):
        e[2 + i, i] = 1.0
    e[n + 1, n - 2] = -0.5
    e[n + 2, n - 2] = 1.0
    return e


@dataclass(frozen=True)
class FluidGrid:
    """Square spline lattice over the box (0, ell) x (-ell/2, ell/2)."""

    ell: float
    n: int

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("need at least 4 cells per direction")

    @property
    def delta(self) -> float:
        return self.ell / self.n

    @property
    def free_shape(self):
        return (self.n - 1, self.n - 1)

    @functools.cached_property
    def embed(self) -> np.ndarray:
        return _embedding(self.n)

    def full_coeffs(self, free: np.ndarray) -> np.ndarray:
        free = np.asarray(free, dtype=float).reshape(self.free_shape)
        return self.embed @ free @ self.embed.T

    def scatter_full_to_free(self, g_full: np.ndarray) -> np.ndarray:
        return self.embed.T @ g_full @ self.embed

    def _local(self, points: np.ndarray):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x = pts[:, 0]
        y = pts[:, 1] + self.ell / 2.0     # internal y measured from the floor
        ix = np.clip(np.floor(x / self.delta).astype(int), 0, self.n - 1)
        iy = np.clip(np.floor(y / self.delta).astype(int), 0, self.n - 1)
        tx = x / self.delta - ix
        ty = y / self.delta - iy
        return ix, iy, tx, ty

    def tables(self, points: np.ndarray, max_order: int = 3) -> "PointTables":
        ix, iy, tx, ty = self._local(points)
        wx = [_cardinal_at(tx, d) / self.delta**d for d in range(max_order + 1)]
        wy = [_cardinal_at(ty, d) / self.delta**d for d in range(max_order + 1)]
        rows = ix[:, None] + np.arange(4)
        cols = iy[:, None] + np.arange(4)
        return PointTables(self, rows, cols, wx, wy)

    @functools.lru_cache(maxsize=8)
    def cell_gauss(self, order: int = 3):
        """Tensor Gauss points over all cells, in box coordinates."""
        g, gw = leggauss(order)
        t = 0.5 * (g + 1.0)
        d = self.delta
        base = np.arange(self.n) * d
        x1 = (base[:, None] + t[None, :] * d).ravel()
        w1 = np.tile(0.5 * gw * d, self.n)
        X, Y = np.meshgrid(x1, x1, indexing="ij")
        W = np.outer(w1, w1).ravel()
        pts = np.stack([X.ravel(), Y.ravel() - self.ell / 2.0], axis=1)
        pts.setflags(write=False)
        W.setflags(write=False)
        return pts, W


@dataclass
class PointTables:
    """Cached basis tables for one point set; evaluation and its adjoint."""

    grid: FluidGrid
    rows: np.ndarray
    cols: np.ndarray
    wx: list
    wy: list

    def eval(self, full: np.ndarray, dx: int, dy: int) -> np.ndarray:
        patch = full[self.rows[:, :, None], self.cols[:, None, :]]
        return np.einsum("pij,pi,pj->p", patch, self.wx[dx], self.wy[dy])

    def scatter(self, dx: int, dy: int, weights: np.ndarray,
                out: np.ndarray | None = None) -> np.ndarray:
        n = self.grid.n
        if out is None:
            out = np.zeros((n + 3, n + 3))
        contrib = weights[:, None, None] * self.wx[dx][:, :, None] * self.wy[dy][:, None, :]
        np.add.at(out, (self.rows[:, :, None], self.cols[:, None, :]), contrib)
        return out


@dataclass(eq=False)
class StreamField:
    """A stream function given by its free coefficient grid."""

    grid: FluidGrid
    free: np.ndarray
    _full: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.free = np.asarray(self.free, dtype=float).reshape(self.grid.free_shape)
        if self._full is None:
            self._full = self.grid.full_coeffs(self.free)

    @classmethod
    def zero(cls, grid: FluidGrid) -> "StreamField":
        return cls(grid, np.zeros(grid.free_shape))

    def psi(self, points, dx: int = 0, dy: int = 0) -> np.ndarray:
        pt = self.grid.tables(points, max_order=max(dx, dy))
        return pt.eval(self._full, dx, dy)

    def velocity(self, points) -> np.ndarray:
        pt = self.grid.tables(points, max_order=1)
        return np.stack([pt.eval(self._full, 0, 1),
                         -pt.eval(self._full, 1, 0)], axis=1)

    def velocity_jets(self, points):
        """u, grad u, and the second jet grad^2 u at points.

        grad u[p, i, j] = d_j u_i; hess[p, i, j, k] = d_j d_k u_i.
        """
        pt = self.grid.tables(points, max_order=3)
        p = lambda a, b: pt.eval(self._full, a, b)
        u = np.stack([p(0, 1), -p(1, 0)], axis=1)
        gu = np.empty((u.shape[0], 2, 2))
        gu[:, 0, 0] = p(1, 1)
        gu[:, 0, 1] = p(0, 2)
        gu[:, 1, 0] = -p(2, 0)
        gu[:, 1, 1] = -p(1, 1)
        hu = np.empty((u.shape[0], 2, 2, 2))
        hu[:, 0, 0, 0] = p(2, 1)
        hu[:, 0, 0, 1] = p(1, 2)
        hu[:, 0, 1, 0] = p(1, 2)
        hu[:, 0, 1, 1] = p(0, 3)
        hu[:, 1, 0, 0] = -p(3, 0)
        hu[:, 1, 0, 1] = -p(2, 1)
        hu[:, 1, 1, 0] = -p(2, 1)
        hu[:, 1, 1, 1] = -p(1, 2)
        return u, gu, hu

    def mixed(self, points, pairs):
        """Evaluate several (dx, dy) mixed partials of psi at once."""
        pt = self.grid.tables(points, max_order=max(max(a, b) for a, b in pairs))
        return {ab: pt.eval(self._full, *ab) for ab in pairs}

    def grad_laplacian(self, points) -> np.ndarray:
        """The a.e. hyperviscous jet grad(laplace u), shape (p, 2, 2).

        Pure fourth derivatives vanish cell-wise for a bicubic, so only the
        mixed orders (3,1), (1,3), (2,2) contribute.
        """
        m = self.mixed(points, [(3, 1), (1, 3), (2, 2)])
        a = m[(3, 1)] + m[(1, 3)]
        out = np.empty((a.shape[0], 2, 2))
        out[:, 0, 0] = a
        out[:, 0, 1] = m[(2, 2)]
        out[:, 1, 0] = -m[(2, 2)]
        out[:, 1, 1] = -a
        return out


def eps_sq_from_mixed(p11, p20, p02) -> np.ndarray:
    """|sym grad u|^2 from mixed stream derivatives: 2 psi_xy^2 + (psi_yy - psi_xx)^2 / 2."""
    return 2.0 * p11**2 + 0.5 * (p02 - p20) ** 2


def gradlap_sq_from_mixed(p31, p13, p22) -> np.ndarray:
    """|grad laplace u|^2 a.e.: 2 (psi_xxxy + psi_xyyy)^2 + 2 psi_xxyy^2."""
    return 2.0 * (p31 + p13) ** 2 + 2.0 * p22**2


def divergence_two_ways(field: StreamField, points) -> float:
    """Max |div u| with the two cross-derivative summation orders.

    div u = d1 d2 psi - d2 d1 psi; the two evaluations run the tensor
    contraction in opposite directions so the cancellation is a genuine
    floating-point check, not an algebraic identity of one code path.
    """
    pt = field.grid.tables(points, max_order=1)
    patch = field._full[pt.rows[:, :, None], pt.cols[:, None, :]]
    a = np.einsum("pij,pi,pj->p", patch, pt.wx[1], pt.wy[1])
    b = np.einsum("pij,pj,pi->p",
                  np.swapaxes(patch, 1, 2), pt.wx[1], pt.wy[1])
    return float(np.max(np.abs(a - b)))


def boundary_max_speed(field: StreamField, samples_per_side: int = 257) -> float:
    g = field.grid
    s = np.linspace(0.0, g.ell, samples_per_side)
    half = g.ell / 2.0
    pts = np.concatenate([
        np.stack([s, np.full_like(s, -half)], 1),
        np.stack([s, np.full_like(s, half)], 1),
        np.stack([np.zeros_like(s), s - half], 1),
        np.stack([np.full_like(s, g.ell), s - half], 1),
    ])
    return float(np.max(np.abs(field.velocity(pts))))


def _collocation_matrix(n: int) -> np.ndarray:
    """Values of the embedded basis at the interior knots, (n-1) x (n-1)."""
    v = np.zeros((n - 1, n + 3))
    for i in range(1, n):
        # at knot i the cardinal splines c_{i-1}, c_i, c_{i+1} weigh 1/6, 4/6, 1/6
        v[i - 1, i] = 1.0 / 6.0
        v[i - 1, i + 1] = 4.0 / 6.0
        v[i - 1, i + 2] = 1.0 / 6.0
    return v @ _embedding(n)


def interpolate_stream(grid: FluidGrid, psi_fn) -> StreamField:
    """Collocate a scalar function at the interior knots of the lattice.

    The function is sampled in box coordinates; boundary behaviour of the
    result is always the clamped one regardless of psi_fn.
    """
    n = grid.n
    knots = np.arange(1, n) * grid.delta
    X, Y = np.meshgrid(knots, knots - grid.ell / 2.0, indexing="ij")
    samples = np.asarray(psi_fn(X, Y), dtype=float)
    a = _collocation_matrix(n)
    free = np.linalg.solve(a, np.linalg.solve(a, samples.T).T)
    return StreamField(grid, free)


def stream_bump(grid: FluidGrid, amplitude: float = 1.0) -> StreamField:
    """Preset initial stream: a single smooth vortex filling the box."""
    ell = grid.ell

    def fn(x, y):
        return amplitude * np.sin(np.pi * x / ell) ** 2 \
            * np.sin(np.pi * (y + ell / 2.0) / ell) ** 2

    return interpolate_stream(grid, fn)
