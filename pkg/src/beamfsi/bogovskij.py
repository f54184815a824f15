"""Right inverse of the divergence on subgraph domains, staggered-grid version.

Domains are subgraphs {0 < y < g(x), 0 < x < ell} with gamma <= g <= height
and Lip(g) <= L.  The construction is universal: a stripe decomposition built
from (ell, gamma, L) alone (overlapping vertical stripes of width
a = gamma / (2L) stepping by a / 2, each star-shaped with respect to a cube
at its base), a partition of unity subordinate to the stripes, and compactly
supported unit-mass bumps in the overlaps that shuffle excess mass between
neighbouring stripes so each local datum is exactly mean-free.

Discretely everything lives on a MAC staggered grid: scalar data at cell
centers, horizontal velocity on vertical faces, vertical velocity on
horizontal faces.  Per stripe the solver returns the minimizer of the
discrete H^1 norm subject to the exact discrete divergence constraint (a
sparse KKT system, factored once per stripe and reused).  Because the
discrete mass shuffle telescopes exactly, the glued field satisfies
div v = f cell-wise to solver precision, vanishes identically outside the
domain, and each stripe contribution vanishes identically outside its stripe.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "StripeSet",
    "stripe_decomposition",
    "SubgraphDomain",
    "MACField",
    "mass_shuffle",
    "reference_bogovskij",
    "universal_bogovskij",
    "verify_star_shape",
    "operator_norm_probe",
    "norm_bound_formula",
]


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 + t * (-15.0 + 6.0 * t))


def _smoothstep_d(t: np.ndarray) -> np.ndarray:
    tc = np.clip(t, 0.0, 1.0)
    return np.where((t > 0) & (t < 1), 30.0 * tc**2 * (1.0 - tc) ** 2, 0.0)


def _bump(t: np.ndarray) -> np.ndarray:
    """C^2 unit-mass bump supported on [0, 1]."""
    inside = (t > 0.0) & (t < 1.0)
    tt = np.where(inside, t, 0.5)
    return np.where(inside, 140.0 * tt**3 * (1.0 - tt) ** 3, 0.0)


@dataclass(frozen=True)
class StripeSet:
    """Stripe decomposition of the base interval, independent of the graph."""

    ell: float
    gamma: float
    lip: float

    def __post_init__(self):
        if self.lip < 1.0:
            raise ValueError("Lipschitz constant must be >= 1 (raise it if smaller)")
        if not 0.0 < self.gamma <= self.ell:
            raise ValueError("need 0 < gamma <= ell")

    @property
    def width(self) -> float:
        """Stripe width a = gamma / (2 L); stripes step by a / 2."""
        return self.gamma / (2.0 * self.lip)

    @property
    def count(self) -> int:
        return int(np.floor(2.0 * self.ell / self.width + 1e-12))

    def x_range(self, k: int):
        """Footprint of stripe k (1-based), clipped to the base interval."""
        a = self.width
        return (max((k - 1) * a / 2.0, 0.0), min((k + 1) * a / 2.0, self.ell))

    def cube(self, k: int):
        """Base cube the stripe is star-shaped with respect to."""
        lo, hi = self.x_range(k)
        return lo, hi, 0.0, self.width

    def partition(self, k: int, x: np.ndarray) -> np.ndarray:
        """Partition-of-unity weight of stripe k at base points x.

        Quintic smoothstep profile around the stripe center; the first and
        last weights are truncated to plateaus so the family sums to one on
        all of [0, ell].
        """
        a = self.width
        u = (np.asarray(x, float) - k * a / 2.0) / (a / 2.0)
        val = _smoothstep(1.0 - np.abs(u))
        if k == 1:
            val = np.where(u < 0.0, 1.0, val)
        if k == self.count:
            val = np.where(u > 0.0, 1.0, val)
        return val

    def partition_d(self, k: int, x: np.ndarray) -> np.ndarray:
        a = self.width
        u = (np.asarray(x, float) - k * a / 2.0) / (a / 2.0)
        val = -np.sign(u) * _smoothstep_d(1.0 - np.abs(u)) / (a / 2.0)
        if k == 1:
            val = np.where(u < 0.0, 0.0, val)
        if k == self.count:
            val = np.where(u > 0.0, 0.0, val)
        return val

    def overlap_bump(self, k: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unit-mass bump in the overlap of stripes k and k+1 (k = 1..count-1).

        Supported on [k a/2, (k+1) a/2] x [0, gamma], inside both stripes and
        below every admissible graph.
        """
        a = self.width
        tx = (np.asarray(x, float) - k * a / 2.0) / (a / 2.0)
        ty = np.asarray(y, float) / self.gamma
        return _bump(tx) * _bump(ty) / ((a / 2.0) * self.gamma)


def stripe_decomposition(ell: float, gamma: float, lip: float) -> StripeSet:
    return StripeSet(ell, gamma, lip)


@dataclass(frozen=True)
class SubgraphDomain:
    """MAC discretization of a subgraph domain with its stripe decomposition."""

    ell: float
    gamma: float
    lip: float
    height: float
    nx: int
    graph: object      # callable x -> g(x)

    def __post_init__(self):
        xs = np.linspace(0.0, self.ell, 4 * self.nx + 1)
        g = np.asarray(self.graph(xs), float)
        if g.min() < self.gamma - 1e-9:
            raise ValueError("graph dips below gamma")
        if g.max() > self.height + 1e-9:
            raise ValueError("graph exceeds the stated height")
        slopes = np.abs(np.diff(g) / np.diff(xs))
        if slopes.max() > self.lip * (1.0 + 1e-6):
            raise ValueError("sampled slope exceeds the stated Lipschitz bound")

    @property
    def dx(self) -> float:
        return self.ell / self.nx

    @property
    def ny(self) -> int:
        return int(np.ceil(self.height / self.dx - 1e-12))

    @functools.cached_property
    def stripes(self) -> StripeSet:
        return StripeSet(self.ell, self.gamma, self.lip)

    @functools.cached_property
    def inside(self) -> np.ndarray:
        """Cells whose center lies below the graph, shape (nx, ny)."""
        xc = (np.arange(self.nx) + 0.5) * self.dx
        yc = (np.arange(self.ny) + 0.5) * self.dx
        g = np.asarray(self.graph(xc), float)
        mask = yc[None, :] < g[:, None]
        mask.setflags(write=False)
        return mask

    def cell_centers(self):
        xc = (np.arange(self.nx) + 0.5) * self.dx
        yc = (np.arange(self.ny) + 0.5) * self.dx
        return xc, yc

    @property
    def cell_area(self) -> float:
        return self.dx * self.dx


@dataclass
class MACField:
    """Staggered velocity: vx on vertical faces, vy on horizontal faces."""

    dx: float
    vx: np.ndarray       # (nx + 1, ny)
    vy: np.ndarray       # (nx, ny + 1)

    @classmethod
    def zero(cls, nx: int, ny: int, dx: float) -> "MACField":
        return cls(dx, np.zeros((nx + 1, ny)), np.zeros((nx, ny + 1)))

    def copy(self) -> "MACField":
        return MACField(self.dx, self.vx.copy(), self.vy.copy())

    def __iadd__(self, other: "MACField") -> "MACField":
        self.vx += other.vx
        self.vy += other.vy
        return self

    def divergence(self) -> np.ndarray:
        return (np.diff(self.vx, axis=0) + np.diff(self.vy, axis=1)) / self.dx

    def h1_norm_sq(self) -> float:
        """Mass plus all finite differences, fields extended by zero."""
        d = self.dx
        total = (np.sum(self.vx**2) + np.sum(self.vy**2)) * d * d
        for arr, axis in ((self.vx, 0), (self.vx, 1), (self.vy, 0), (self.vy, 1)):
            pad = [(0, 0), (0, 0)]
            pad[axis] = (1, 1)
            padded = np.pad(arr, pad)
            total += np.sum(np.diff(padded, axis=axis) ** 2)
        return float(total)

    def _interp(self, arr: np.ndarray, ox: float, oy: float, pts: np.ndarray,
                grad: bool):
        """Bilinear interpolation on a staggered lattice with zero extension.

        ox, oy are lattice origins in units of dx (0 for face-aligned,
        0.5 for center-aligned coordinates).
        """
        d = self.dx
        fx = pts[:, 0] / d - ox
        fy = pts[:, 1] / d - oy
        i0 = np.floor(fx).astype(int)
        j0 = np.floor(fy).astype(int)
        tx = fx - i0
        ty = fy - j0
        padded = np.pad(arr, ((1, 1), (1, 1)))
        i = np.clip(i0 + 1, 0, arr.shape[0])
        j = np.clip(j0 + 1, 0, arr.shape[1])
        # out-of-lattice points read zeros from the pad ring
        v00 = padded[i, j]
        v10 = padded[np.clip(i + 1, 0, arr.shape[0] + 1), j]
        v01 = padded[i, np.clip(j + 1, 0, arr.shape[1] + 1)]
        v11 = padded[np.clip(i + 1, 0, arr.shape[0] + 1),
                     np.clip(j + 1, 0, arr.shape[1] + 1)]
        if not grad:
            return (v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty)
                    + v01 * (1 - tx) * ty + v11 * tx * ty)
        gx = ((v10 - v00) * (1 - ty) + (v11 - v01) * ty) / d
        gy = ((v01 - v00) * (1 - tx) + (v11 - v10) * tx) / d
        return gx, gy

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """Velocity at arbitrary points (domain coordinates, floor at y = 0)."""
        pts = np.atleast_2d(np.asarray(pts, float))
        u1 = self._interp(self.vx, 0.0, 0.5, pts, grad=False)
        u2 = self._interp(self.vy, 0.5, 0.0, pts, grad=False)
        return np.stack([u1, u2], axis=1)

    def sample_grad(self, pts: np.ndarray) -> np.ndarray:
        """Gradient of the bilinear interpolant, (p, 2, 2), d_j u_i."""
        pts = np.atleast_2d(np.asarray(pts, float))
        g1x, g1y = self._interp(self.vx, 0.0, 0.5, pts, grad=True)
        g2x, g2y = self._interp(self.vy, 0.5, 0.0, pts, grad=True)
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = g1x
        out[:, 0, 1] = g1y
        out[:, 1, 0] = g2x
        out[:, 1, 1] = g2y
        return out


# --- discrete operators ----------------------------------------------------

def _face_index_maps(nx: int, ny: int):
    nvx = (nx + 1) * ny
    nvy = nx * (ny + 1)

    def vx_id(i, j):
        return i * ny + j

    def vy_id(i, j):
        return nvx + i * (ny + 1) + j

    return nvx, nvy, vx_id, vy_id


def _divergence_matrix(nx: int, ny: int, dx: float) -> sp.csr_matrix:
    nvx, nvy, vx_id, vy_id = _face_index_maps(nx, ny)
    rows, cols, vals = [], [], []
    for i in range(nx):
        for j in range(ny):
            c = i * ny + j
            for col, s in ((vx_id(i + 1, j), 1.0), (vx_id(i, j), -1.0),
                           (vy_id(i, j + 1), 1.0), (vy_id(i, j), -1.0)):
                rows.append(c)
                cols.append(col)
                vals.append(s / dx)
    return sp.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nvx + nvy))


def _h1_matrix(nx: int, ny: int, dx: float) -> sp.csr_matrix:
    """Quadratic form of MACField.h1_norm_sq on the flat face vector."""
    nvx, nvy, vx_id, vy_id = _face_index_maps(nx, ny)
    nf = nvx + nvy
    mass = sp.identity(nf, format="csr") * (dx * dx)

    def diff_rows(shape, idfun, axis):
        rows, cols, vals = [], [], []
        r = 0
        n0, n1 = shape
        rng0 = range(n0 + 1) if axis == 0 else range(n0)
        rng1 = range(n1) if axis == 0 else range(n1 + 1)
        for i in rng0:
            for j in rng1:
                if axis == 0:
                    pair = ((i, j, 1.0), (i - 1, j, -1.0))
                else:
                    pair = ((i, j, 1.0), (i, j - 1, -1.0))
                for (pi, pj, s) in pair:
                    if 0 <= pi < n0 and 0 <= pj < n1:
                        rows.append(r)
                        cols.append(idfun(pi, pj))
                        vals.append(s)
                r += 1
        return sp.csr_matrix((vals, (rows, cols)), shape=(r, nf))

    k = mass
    for shape, idfun in (((nx + 1, ny), vx_id), ((nx, ny + 1), vy_id)):
        for axis in (0, 1):
            g = diff_rows(shape, idfun, axis)
            k = k + g.T @ g
    return k.tocsr()


class _StripeSolver:
    """KKT factorization for the min-H^1 divergence solve on one stripe."""

    def __init__(self, domain: SubgraphDomain, k: int,
                 h1: sp.csr_matrix, div: sp.csr_matrix):
        nx, ny, dx = domain.nx, domain.ny, domain.dx
        lo, hi = domain.stripes.x_range(k)
        xc, _ = domain.cell_centers()
        in_x = (xc > lo) & (xc < hi)
        cells = domain.inside & in_x[:, None]
        self.cells = cells
        ci, cj = np.nonzero(cells)
        self.cell_list = list(zip(ci.tolist(), cj.tolist()))
        if not self.cell_list:
            raise ValueError(f"stripe {k} holds no cells at this resolution")
        nvx, nvy, vx_id, vy_id = _face_index_maps(nx, ny)
        cellmask = np.zeros((nx + 2, ny + 2), bool)
        cellmask[1:-1, 1:-1] = cells
        act = []
        for i in range(nx + 1):
            for j in range(ny):
                if cellmask[i, j + 1] and cellmask[i + 1, j + 1]:
                    act.append(vx_id(i, j))
        for i in range(nx):
            for j in range(ny + 1):
                if cellmask[i + 1, j] and cellmask[i + 1, j + 1]:
                    act.append(vy_id(i, j))
        self.faces = np.array(act, dtype=int)
        self.nx, self.ny, self.dx = nx, ny, dx
        cell_rows = np.array([i * ny + j for (i, j) in self.cell_list], dtype=int)
        # drop the first cell's constraint: it is implied by the telescoping
        # of the divergence against exact mean-zero data
        self.kept_rows = cell_rows[1:]
        d_sub = div[self.kept_rows][:, self.faces]
        h_sub = h1[self.faces][:, self.faces]
        nf, nc = len(self.faces), len(self.kept_rows)
        kkt = sp.bmat([[h_sub, d_sub.T], [d_sub, None]], format="csc")
        self.lu = splu(kkt)
        self.nf, self.nc = nf, nc

    def solve(self, f_cells: np.ndarray) -> MACField:
        """Minimum-H^1 field with divergence f on the stripe cells.

        f_cells is a full (nx, ny) array supported on the stripe; it must be
        exactly mean-free over the stripe.
        """
        rhs = np.zeros(self.nf + self.nc)
        flat = f_cells.reshape(-1)
        rhs[self.nf:] = flat[self.kept_rows]
        sol = self.lu.solve(rhs)
        v = np.zeros((self.nx + 1) * self.ny + self.nx * (self.ny + 1))
        v[self.faces] = sol[: self.nf]
        nvx = (self.nx + 1) * self.ny
        return MACField(self.dx,
                        v[:nvx].reshape(self.nx + 1, self.ny),
                        v[nvx:].reshape(self.nx, self.ny + 1))


class BogovskijSolver:
    """Glued divergence right inverse on one discretized subgraph domain."""

    def __init__(self, domain: SubgraphDomain):
        self.domain = domain
        nx, ny, dx = domain.nx, domain.ny, domain.dx
        self._h1 = _h1_matrix(nx, ny, dx)
        self._div = _divergence_matrix(nx, ny, dx)
        self._stripe_cache: dict[int, _StripeSolver] = {}
        xc, yc = domain.cell_centers()
        s = domain.stripes
        self._psi = np.stack([s.partition(k, xc) for k in range(1, s.count + 1)])
        bumps = []
        for k in range(1, s.count):
            b = s.overlap_bump(k, xc[:, None], yc[None, :]) * domain.inside
            m = b.sum() * domain.cell_area
            if m <= 0:
                raise ValueError(f"overlap bump {k} lost all mass on the grid")
            bumps.append(b / m)      # exact unit discrete mass
        self._bumps = bumps

    def stripe_solver(self, k: int) -> _StripeSolver:
        if k not in self._stripe_cache:
            self._stripe_cache[k] = _StripeSolver(
                self.domain, k, self._h1, self._div)
        return self._stripe_cache[k]

    def local_data(self, f: np.ndarray) -> list:
        """Mass shuffle: split f into per-stripe exactly mean-free pieces.

        Piece k is f psi_k minus its running accumulated mass pushed into the
        overlap bump on its right, plus the mass received from the left; the
        bumps cancel pairwise so the pieces sum back to f, and each piece has
        zero discrete mean because the bumps carry exact unit discrete mass.
        The last stripe absorbs the global mean, which the caller guarantees
        to vanish.
        """
        dom = self.domain
        f = np.asarray(f, float) * dom.inside
        area = dom.cell_area
        count = dom.stripes.count
        pieces = []
        running = 0.0
        for k in range(1, count + 1):
            piece = f * self._psi[k - 1][:, None]
            prev = running
            running += float(piece.sum() * area)
            if k > 1:
                piece = piece + prev * self._bumps[k - 2]
            if k < count:
                piece = piece - running * self._bumps[k - 1]
            pieces.append(piece)
        return pieces

    def h1_quadratic(self, field: MACField) -> float:
        flat = np.concatenate([field.vx.reshape(-1), field.vy.reshape(-1)])
        return float(flat @ (self._h1 @ flat))

    def solve(self, f: np.ndarray) -> MACField:
        """Field with exact discrete divergence f, glued from stripe solves."""
        dom = self.domain
        pieces = self.local_data(f)
        out = MACField.zero(dom.nx, dom.ny, dom.dx)
        for k, piece in enumerate(pieces, start=1):
            out += self.stripe_solver(k).solve(piece)
        return out


@functools.lru_cache(maxsize=32)
def _solver_for(domain: SubgraphDomain) -> BogovskijSolver:
    return BogovskijSolver(domain)


def reference_bogovskij(domain: SubgraphDomain, k: int,
                        f_cells: np.ndarray) -> MACField:
    """Single-stripe minimum-norm solve (the building block)."""
    return _solver_for(domain).stripe_solver(k).solve(np.asarray(f_cells, float))


def universal_bogovskij(domain: SubgraphDomain, f_cells: np.ndarray) -> MACField:
    """Solve div v = f on the whole subgraph domain, f mean-free cell data."""
    return _solver_for(domain).solve(f_cells)


def mass_shuffle(domain: SubgraphDomain, f_cells: np.ndarray) -> list:
    """Per-stripe exactly mean-free pieces of f; they sum back to f."""
    return _solver_for(domain).local_data(f_cells)


def verify_star_shape(domain: SubgraphDomain, k: int, samples: int = 33) -> float:
    """Worst signed violation of the segment condition for stripe k.

    Samples boundary points of the stripe (graph points over its footprint)
    against points of its base cube; returns max over segment samples of
    y - g(x), which is <= 0 when the stripe is star-shaped w.r.t. the cube.
    """
    s = domain.stripes
    lo, hi, y0, y1 = s.cube(k)
    xs = np.linspace(lo, hi, samples)
    tops = np.stack([xs, np.asarray(domain.graph(xs), float)], 1)
    qx, qy = np.meshgrid(np.linspace(lo, hi, 5), np.linspace(y0, y1, 5))
    cube_pts = np.stack([qx.ravel(), qy.ravel()], 1)
    t = np.linspace(0.0, 1.0, samples)[:, None, None, None]
    seg = tops[None, :, None, :] * (1 - t) + cube_pts[None, None, :, :] * t
    seg = seg.reshape(-1, 2)
    g_at = np.asarray(domain.graph(seg[:, 0]), float)
    return float(np.max(seg[:, 1] - g_at))


def norm_bound_formula(ell: float, gamma: float, lip: float) -> float:
    """Scaling of the operator norm predicted by the construction."""
    return (1.0 + ell) * np.sqrt(ell * lip) / gamma


def operator_norm_probe(domains, trials: int, seed: int = 0):
    """Measured H^1/L^2 operator norms against the formula, per domain."""
    rng = np.random.default_rng(seed)
    report = []
    for dom in domains:
        solver = _solver_for(dom)
        xc, yc = dom.cell_centers()
        X, Y = np.meshgrid(xc, yc, indexing="ij")
        worst = 0.0
        for _ in range(trials):
            f = np.zeros((dom.nx, dom.ny))
            for _ in range(4):
                cx = rng.uniform(0.1 * dom.ell, 0.9 * dom.ell)
                cy = rng.uniform(0.1 * dom.gamma, 0.9 * dom.gamma)
                w = rng.uniform(0.05, 0.2) * dom.ell
                f += rng.normal() * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / w**2)
            f *= dom.inside
            f -= f.sum() / dom.inside.sum() * dom.inside
            l2 = np.sqrt(np.sum(f**2) * dom.cell_area)
            if l2 < 1e-14:
                continue
            v = solver.solve(f)
            ratio = np.sqrt(v.h1_norm_sq()) / l2
            worst = max(worst, ratio)
        report.append({
            "measured": worst,
            "formula": norm_bound_formula(dom.ell, dom.gamma, dom.lip),
        })
    return report
