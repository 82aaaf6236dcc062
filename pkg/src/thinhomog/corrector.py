"""First-order corrector on the thin domain and per-epsilon error reports."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .fem2d import FemSolution, assemble_mass, fem_norms, solve_full
from .geometry import EPS0_DEFAULT, thin_domain
from .homog import CoefficientTable, Homog1DSolution, SourceSpec
from .mesh import mesh_thin
from .profile import ProfileSpec


@dataclass(frozen=True, eq=False)
class CorrectorField:
    """Cell solutions of a coefficient table transported onto the thin domain.

    A point ``(x1, x2)`` is sent to ``y = (x1/eps) mod L``, ``z = x2/eps``; its
    height fraction in the local column is reproduced in the two table cells
    bracketing ``x1`` and the cell values are blended linearly in ``x1``.
    """

    epsilon: float
    table: CoefficientTable
    w0ref: Homog1DSolution

    @property
    def profile(self) -> ProfileSpec:
        return self.table.profile

    def _fraction(self, x1, y, z):
        """Height fraction of ``(y, z)`` in the column of the local cell at ``x1``.

        The roof is the piecewise-linear interpolant of ``G(x1, .)`` on the
        cell column grid, so thin-mesh vertices land exactly on cell vertices.
        """
        prof = self.profile
        ny = self.table.ny
        L = prof.L
        ys = np.linspace(0.0, L, ny + 1)
        i = np.clip((y / L * ny).astype(int), 0, ny - 1)
        s = (y - ys[i]) / (ys[i + 1] - ys[i])
        g0 = prof.G(x1, ys[i])
        g1 = prof.G(x1, np.where(i + 1 == ny, 0.0, ys[i + 1]))
        top = (1 - s) * g0 + s * g1
        floor = -np.broadcast_to(prof.b(x1), np.shape(x1))
        return (z - floor) / (top - floor)

    def _cell_eval(self, idx, y, t):
        cell = self.table.cells[idx]
        mesh = cell.mesh
        nz = mesh.nz
        floor = mesh.vertices[0, 1]
        ncol = mesh.ncols
        cols = mesh.columns
        i = np.clip(np.searchsorted(cols, y, side="right") - 1, 0, ncol - 1)
        s = (y - cols[i]) / (cols[i + 1] - cols[i])
        top = (1 - s) * mesh.vertices[i * (nz + 1) + nz, 1] + s * mesh.vertices[(i + 1) * (nz + 1) + nz, 1]
        z = floor + t * (top - floor)
        tri, bary = mesh.locate(np.column_stack([y, z]))
        val = np.einsum("ij,ij->i", cell.values[mesh.triangles[tri]], bary)
        return val, cell.grad[tri, 0], cell.grad[tri, 1]

    def sample(self, x1, x2, tol=1e-9):
        """Return ``(X, dX/dy, dX/dz, dX/dx)`` at thin-domain points."""
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        x1, x2 = np.broadcast_arrays(x1, x2)
        eps = self.epsilon
        L = self.profile.L
        y = np.mod(x1 / eps, L)
        t = self._fraction(x1, y, x2 / eps)
        if np.any(t < -tol) or np.any(t > 1 + tol):
            bad = int(np.argmax(np.maximum(-t, t - 1)))
            raise ValueError(f"point ({x1[bad]}, {x2[bad]}) lies outside the mapped cells")
        t = np.clip(t, 0.0, 1.0)
        table = self.table
        if self.profile.y_only:
            v, gy, gz = self._cell_eval(0, y, t)
            return v, gy, gz, np.zeros_like(v)
        a, b, wa = table.bracket(x1)
        out = np.zeros((2, 3, len(x1)))
        for side, idx in enumerate((a, b)):
            for s in np.unique(idx):
                sel = idx == s
                out[side, :, sel] = np.column_stack(self._cell_eval(int(s), y[sel], t[sel]))
        wb = 1.0 - wa
        v, gy, gz = (wa * out[0] + wb * out[1])
        dx = (out[1, 0] - out[0, 0]) / (table.xs[b] - table.xs[a])
        return v, gy, gz, dx


def eval_X(field: CorrectorField, x1, x2, deriv: str = "value"):
    v, gy, gz, gx = field.sample(x1, x2)
    try:
        return {"value": v, "dy": gy, "dz": gz, "dx": gx}[deriv]
    except KeyError:
        raise ValueError(f"deriv must be one of value, dy, dz, dx; got {deriv!r}") from None


def kappa(field: CorrectorField, x1, x2):
    """``kappa = -eps X dw0/dx1``."""
    X = field.sample(x1, x2)[0]
    return -field.epsilon * X * field.w0ref.dw0(np.asarray(x1, dtype=float))


def grad_kappa(field: CorrectorField, x1, x2):
    """Chain-rule gradient of the corrector, ``(d/dx1, d/dx2)``."""
    x1 = np.asarray(x1, dtype=float)
    X, Xy, Xz, Xx = field.sample(x1, x2)
    eps = field.epsilon
    dw = field.w0ref.dw0(x1)
    d2w = field.w0ref.d2w0(x1)
    g1 = -Xy * dw - eps * (Xx * dw + X * d2w)
    g2 = -Xz * dw
    return g1, g2


def rescaled_norms(u: FemSolution, epsilon: float):
    """Norms in the measure ``eps^-1 dx``."""
    n = fem_norms(u)
    s = epsilon ** -0.5
    l2 = s * n["l2"]
    return {"l2": l2, "h1": float(np.hypot(l2, s * n["h1_semi"]))}


@dataclass(frozen=True)
class ErrorReport:
    epsilon: float
    n_vertices: int
    n_triangles: int
    h: float
    e_l2_plain: float
    e_h1_plain: float
    e_l2_corr: float
    e_h1_corr: float
    norm_X: float
    kappa_l2: float
    kappa_h1: float
    kappa_l2_bound: float
    f_norm: float
    cg_iterations: int

    def as_dict(self):
        return asdict(self)


def error_report(profile: ProfileSpec, source: SourceSpec, table: CoefficientTable, w0: Homog1DSolution,
                 epsilon: float, cells_per_period: int = 16, nz: int = 8, tol: float = 1e-10,
                 eps0: float = EPS0_DEFAULT) -> ErrorReport:
    """Solve the thin problem at ``epsilon`` and measure it against ``w0`` and ``w0 + kappa``.

    ``w0`` and the corrector are interpolated at the mesh vertices, so all
    differences live in the P1 space of the thin mesh.  For the corrector to be
    consistent with the discrete thin problem the table cells should use
    ``ny = cells_per_period`` columns and the same ``nz``.
    """
    spec = thin_domain(profile, epsilon, eps0)
    mesh = mesh_thin(spec, cells_per_period, nz)
    w = solve_full(mesh, source.f, tol)
    x1, x2 = mesh.vertices[:, 0], mesh.vertices[:, 1]
    field = CorrectorField(epsilon, table, w0)
    X = field.sample(x1, x2)[0]
    dw = w0.dw0(x1)
    kap = -epsilon * X * dw
    w0n = w0.w0(x1)

    def norms(v):
        return rescaled_norms(FemSolution(mesh, v), epsilon)

    plain = norms(w.dofs - w0n)
    corr = norms(w.dofs - w0n - kap)
    kn = norms(kap)
    M = assemble_mass(mesh)
    fn = source.f(x1, x2)
    xs = np.linspace(0.0, 1.0, 2001)
    return ErrorReport(
        epsilon=float(epsilon),
        n_vertices=mesh.n_vertices,
        n_triangles=mesh.n_triangles,
        h=mesh.h(),
        e_l2_plain=plain["l2"],
        e_h1_plain=plain["h1"],
        e_l2_corr=corr["l2"],
        e_h1_corr=corr["h1"],
        norm_X=norms(X)["l2"],
        kappa_l2=kn["l2"],
        kappa_h1=kn["h1"],
        kappa_l2_bound=float(epsilon * np.max(np.abs(X)) * np.max(np.abs(w0.dw0(xs))) * np.sqrt(
            np.sum(mesh.areas()) / epsilon)),
        f_norm=float(np.sqrt(fn @ (M @ fn) / epsilon)),
        cg_iterations=len(w.history) - 1,
    )
