"""Effective coefficients, averaged sources and the 1D homogenized solve."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CellSolveError, ConvergenceError
from .fem2d import CellSolution, cell_coefficients, solve_cell
from .geometry import cell_at
from .mesh import Interval1DMesh, mesh_cell, mesh_interval
from .profile import Expr, ProfileSpec, as_expr, evaluate


def compute_rp(cell: CellSolution):
    """``(r, p)`` from a solved cell: ``r = (1/L) int (1 - dX/dy)``, ``p = |Y*| / L``."""
    return cell_coefficients(cell.mesh, cell.grad, cell.L)


def r_energy(cell: CellSolution) -> float:
    """Energy form ``(1/L) int ((1 - dX/dy)^2 + (dX/dz)^2)`` of the same coefficient."""
    areas = cell.mesh.areas()
    g = cell.grad
    return float(np.dot(areas, (1.0 - g[:, 0]) ** 2 + g[:, 1] ** 2)) / cell.L


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """Samples of ``r`` and ``p`` in ``x`` with piecewise-linear interpolation."""

    xs: np.ndarray
    r: np.ndarray
    p: np.ndarray
    cells: tuple = field(default=(), repr=False)
    profile: ProfileSpec | None = field(default=None, repr=False)
    ny: int = 0
    nz: int = 0

    @classmethod
    def constant(cls, r, p):
        return cls(np.array([0.0, 1.0]), np.array([r, r], float), np.array([p, p], float))

    def r_at(self, x):
        return np.interp(x, self.xs, self.r)

    def p_at(self, x):
        return np.interp(x, self.xs, self.p)

    def bracket(self, x):
        """Indices ``(a, b)`` and weight of ``a`` for linear blending at ``x``."""
        x = np.asarray(x, dtype=float)
        b = np.clip(np.searchsorted(self.xs, x, side="right"), 1, len(self.xs) - 1)
        a = b - 1
        wa = (self.xs[b] - x) / (self.xs[b] - self.xs[a])
        return a, b, np.clip(wa, 0.0, 1.0)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "r", "p"])
            for x, r, p in zip(self.xs, self.r, self.p):
                w.writerow([f"{x:.17g}", f"{r:.17g}", f"{p:.17g}"])


def solve_cell_at(profile, x, ny, nz, tol=1e-10):
    mesh, pairing = mesh_cell(cell_at(profile, x), ny, nz)
    return solve_cell(mesh, pairing, tol, x=x)


def build_table(profile: ProfileSpec, nx: int = 17, ny: int = 64, nz: int = 32, tol: float = 1e-10,
                workers: int | None = None) -> CoefficientTable:
    """Solve one cell problem per sample ``x_i = i/(nx-1)`` (concurrently)."""
    if nx < 2:
        raise ValueError("nx must be >= 2 (the endpoints 0 and 1 are always sampled)")
    xs = np.linspace(0.0, 1.0, nx)
    if profile.y_only:
        # every cell is the same domain: solve once and share it
        base = _solve_indexed(profile, 0, 0.0, ny, nz, tol)
        cells = [base] * nx
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_solve_indexed, profile, i, x, ny, nz, tol) for i, x in enumerate(xs)]
            cells = [f.result() for f in futs]
    r = np.array([c.r for c in cells])
    p = np.array([c.p for c in cells])
    return CoefficientTable(xs, r, p, tuple(cells), profile, ny, nz)


def _solve_indexed(profile, i, x, ny, nz, tol):
    try:
        return solve_cell_at(profile, float(x), ny, nz, tol)
    except Exception as exc:  # noqa: BLE001 - rewrapped with the sample index
        raise CellSolveError(i, float(x), exc) from exc


@dataclass(frozen=True)
class SourceSpec:
    """Source ``f(x1, x2) = f0(x1)``, or a user-supplied averaged limit."""

    f0_expr: Expr
    mode: str = "f0"
    fhat_limit: object = None

    @classmethod
    def from_text(cls, f0):
        return cls(as_expr(f0))

    def f0(self, x):
        return evaluate(self.f0_expr, x, 0.0)

    def f(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        return np.broadcast_to(self.f0(x1), np.broadcast_shapes(x1.shape, np.shape(x2)))


def hat_f_eps(source: SourceSpec, profile: ProfileSpec, epsilon: float):
    """Thickness average ``x -> (G(x, x/eps) + b(x)) f0(x)`` of the source."""
    if source.mode != "f0":
        raise ValueError("hat_f_eps is only available for sources of the form f0(x1)")

    def fhat(x):
        x = np.asarray(x, dtype=float)
        return (profile.G(x, x / epsilon) + profile.b(x)) * source.f0(x)

    return fhat


def hat_f_limit(source: SourceSpec, table: CoefficientTable):
    """Weak limit ``x -> p(x) f0(x)``; in general mode the user-supplied limit."""
    if source.mode != "f0":
        if source.fhat_limit is None:
            raise ValueError("general sources need an explicit fhat_limit")
        return source.fhat_limit

    def fhat(x):
        return table.p_at(x) * source.f0(x)

    return fhat


_GX, _GW = np.polynomial.legendre.leggauss(3)
_GX = 0.5 * (_GX + 1.0)
_GW = 0.5 * _GW


def _p2_basis(xi):
    xi = np.asarray(xi)
    N = np.stack([2 * (xi - 0.5) * (xi - 1), 4 * xi * (1 - xi), 2 * xi * (xi - 0.5)], axis=-1)
    dN = np.stack([4 * xi - 3, 4 - 8 * xi, 4 * xi - 1], axis=-1)
    return N, dN


@dataclass(frozen=True, eq=False)
class Homog1DSolution:
    """P2 solution ``w0`` with a continuous derivative representative."""

    mesh: Interval1DMesh
    dofs: np.ndarray
    dw0_nodal: np.ndarray  # continuous P1 values at mesh nodes
    residual: float = 0.0

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        nodes = self.mesh.nodes
        e = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, self.mesh.n_elements - 1)
        h = nodes[e + 1] - nodes[e]
        return e, (x - nodes[e]) / h, h

    def w0(self, x):
        e, xi, _ = self._locate(x)
        N, _ = _p2_basis(xi)
        return np.einsum("...k,...k->...", N, self.dofs[self.mesh.element_dofs[e]])

    def dw0_p2(self, x):
        """Raw (elementwise, discontinuous at nodes) derivative of the P2 solution."""
        e, xi, h = self._locate(x)
        _, dN = _p2_basis(xi)
        return np.einsum("...k,...k->...", dN, self.dofs[self.mesh.element_dofs[e]]) / h

    def dw0(self, x):
        """L2 projection of ``w0'`` onto continuous piecewise linears."""
        return np.interp(x, self.mesh.nodes, self.dw0_nodal)

    def d2w0(self, x):
        """Elementwise second derivative of the P2 solution (piecewise constant)."""
        e, _, h = self._locate(x)
        u = self.dofs[self.mesh.element_dofs[e]]
        return 4.0 * (u[..., 0] - 2 * u[..., 1] + u[..., 2]) / h**2


def solve_homog(table, fhat, n: int = 64, tol: float = 1e-10) -> Homog1DSolution:
    """P2 Galerkin solve of ``int r w' phi' + p w phi = int fhat phi`` on (0, 1).

    Natural (Neumann) ends; 3-point Gauss per element with ``r, p`` taken from
    the table's piecewise-linear interpolants.
    """
    if n < 8:
        raise ValueError(f"solve_homog needs n >= 8, got {n}")
    if table.xs[0] > 0.0 or table.xs[-1] < 1.0:
        raise ValueError("coefficient table does not cover [0, 1]")
    mesh = mesh_interval(n, order=2)
    nodes = mesh.nodes
    h = np.diff(nodes)
    xq = nodes[:-1, None] + h[:, None] * _GX[None, :]  # (n, 3)
    wq = h[:, None] * _GW[None, :]
    N, dN = _p2_basis(_GX)  # (3 qp, 3 basis)
    rq = table.r_at(xq)
    pq = table.p_at(xq)
    fq = np.broadcast_to(np.asarray(fhat(xq), dtype=float), xq.shape)
    Ke = np.einsum("eq,qa,qb->eab", wq * rq / h[:, None] ** 2, dN, dN)
    Me = np.einsum("eq,qa,qb->eab", wq * pq, N, N)
    Fe = np.einsum("eq,qa->ea", wq * fq, N)
    dofs = mesh.element_dofs
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    A = sp.coo_matrix(((Ke + Me).ravel(), (rows, cols)), shape=(mesh.n_dofs,) * 2).tocsc()
    F = np.zeros(mesh.n_dofs)
    np.add.at(F, dofs.ravel(), Fe.ravel())
    w = spla.spsolve(A, F)
    if not np.all(np.isfinite(w)):
        raise ConvergenceError("homogenized solve produced non-finite values")
    res = float(np.max(np.abs(A @ w - F)))
    scale = max(float(np.max(np.abs(F))), 1e-300)
    if res > tol * scale and res > 1e-14:
        raise ConvergenceError(f"homogenized solve residual {res:.3e} exceeds tol")
    return Homog1DSolution(mesh, w, _project_derivative(mesh, w), res)


def _project_derivative(mesh, w):
    """Continuous P1 L2 projection of the P2 derivative (exact 2-point quadrature)."""
    nodes = mesh.nodes
    h = np.diff(nodes)
    n = len(nodes)
    u = w[mesh.element_dofs]
    gx, gw = np.polynomial.legendre.leggauss(2)
    gx = 0.5 * (gx + 1.0)
    gw = 0.5 * gw
    _, dN = _p2_basis(gx)  # (2, 3)
    du = np.einsum("qk,ek->eq", dN, u) / h[:, None]  # derivative at quad points
    phi = np.stack([1 - gx, gx], axis=-1)  # (2 qp, 2 basis)
    b = np.zeros(n)
    be = np.einsum("eq,qa->ea", du * gw[None, :] * h[:, None], phi)
    np.add.at(b, np.arange(n - 1), be[:, 0])
    np.add.at(b, np.arange(1, n), be[:, 1])
    main = np.zeros(n)
    main[:-1] += h / 3
    main[1:] += h / 3
    M = sp.diags([h / 6, main, h / 6], [-1, 0, 1], format="csc")
    return spla.spsolve(M, b)
