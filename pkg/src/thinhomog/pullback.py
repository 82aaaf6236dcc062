"""Fixed-cell reformulation of the perturbed cell problem and related probes.

Inside this module cells use the convention ``0 < z < G(y)`` (flat bottom).
A perturbed roof ``Ghat`` is transported onto the reference cell by
``L(z1, z2) = (z1, F(z1) z2)`` with ``F = Ghat / G``; the cell problem then
becomes a nonsymmetric problem on the fixed cell.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, HypothesisViolation
from .fem2d import (
    FemSolution,
    ReducedSystem,
    _scatter,
    apply_periodic,
    assemble_mass,
    assemble_stiffness,
    basis_gradients,
    lumped_mass,
    neumann_rhs_cell,
    solve_cell,
)
from .geometry import cell_at
from .homog import solve_cell_at
from .mesh import TOP, PeriodicPairing, TriMesh, mesh_cell
from .profile import Bounds, Expr, ProfileSpec, as_expr, deriv, div, evaluate

DENSE_LIMIT = 2000


@dataclass(frozen=True)
class AdmissibleProfile:
    """A one-variable, ``L``-periodic C^1 roof with positive bounds."""

    G_expr: Expr
    L: float = 1.0
    bounds: Bounds | None = field(default=None, compare=False)

    @classmethod
    def from_text(cls, G, L=1.0, grid_density=512):
        expr = as_expr(G)
        if "x" in expr.variables():
            raise ValueError("admissible roofs depend on y only")
        spec = ProfileSpec(as_expr("0"), expr, float(L)).with_bounds(grid_density)
        return cls(expr, float(L), spec.bounds)

    @property
    def spec(self) -> ProfileSpec:
        return ProfileSpec(as_expr("0"), self.G_expr, self.L, self.bounds)

    def G(self, y):
        return evaluate(self.G_expr, 0.0, y)


@dataclass(frozen=True, eq=False)
class PullbackMap:
    """``F = Ghat / G`` and its symbolic derivative."""

    G: AdmissibleProfile
    Ghat: AdmissibleProfile
    F_expr: Expr
    Fprime_expr: Expr

    @property
    def L(self):
        return self.G.L

    def F(self, y):
        return np.broadcast_to(evaluate(self.F_expr, 0.0, y), np.shape(y)).astype(float)

    def Fprime(self, y):
        return np.broadcast_to(evaluate(self.Fprime_expr, 0.0, y), np.shape(y)).astype(float)

    def B(self, z1, z2):
        """Coefficient matrix of the transformed operator, shape ``(..., 2, 2)``."""
        F = self.F(z1)
        Fp = self.Fprime(z1)
        off = -Fp * np.asarray(z2)
        return np.stack([np.stack([F, off], -1), np.stack([off, (1 + off**2) / F], -1)], -2)


def build_pullback(G: AdmissibleProfile, Ghat: AdmissibleProfile, samples: int = 1024) -> PullbackMap:
    if abs(G.L - Ghat.L) > 1e-14 * max(G.L, 1.0):
        raise ValueError(f"period mismatch: {G.L} vs {Ghat.L}")
    F_expr = div(Ghat.G_expr, G.G_expr)
    pm = PullbackMap(G, Ghat, F_expr, deriv(F_expr, "y"))
    bG = G.bounds or G.spec.with_bounds().bounds
    bH = Ghat.bounds or Ghat.spec.with_bounds().bounds
    g0, g1 = min(bG.G0, bH.G0), max(bG.G1, bH.G1)
    ys = np.linspace(0.0, G.L, samples + 1)
    F = pm.F(ys)
    lo, hi = g0 / g1, g1 / g0
    slack = 1e-12 * hi
    if F.min() < lo - slack or F.max() > hi + slack:
        raise HypothesisViolation(f"F = Ghat/G leaves [{lo:.6g}, {hi:.6g}]: range [{F.min():.6g}, {F.max():.6g}]")
    return pm


@dataclass(frozen=True, eq=False)
class TransformedSystem:
    """Periodic-merged transformed system together with its full-size parts."""

    mesh: TriMesh
    pairing: PeriodicPairing
    full_matrix: sp.csr_matrix
    full_rhs: np.ndarray
    reduced: ReducedSystem
    weights: np.ndarray  # reduced lumped-mass weights of the zero-mean constraint

    @property
    def matrix(self):
        return self.reduced.matrix

    @property
    def rhs(self):
        return self.reduced.rhs


def assemble_transformed(meshG: TriMesh, pairing: PeriodicPairing, pmap: PullbackMap) -> TransformedSystem:
    """Assemble ``int B grad U . grad(V / F)`` and its boundary functional on ``Y*(G)``.

    ``B``, ``F`` and ``F'`` are frozen at triangle centroids.  The roof datum
    is ``-int Ghat'(z1) V/F dz1`` with ``Ghat' = F' G_h + F G_h'`` and ``G_h`` the
    polygonal roof of the mesh, integrated by 2-point Gauss on every TOP edge.
    With ``Ghat = G`` this reproduces the plain stiffness matrix and the
    polygonal cell load exactly.
    """
    if abs(float(meshG.vertices[:, 1].min())) > 1e-12:
        raise ValueError("the reference cell must have its bottom at z = 0")
    grads, areas = basis_gradients(meshG)
    c = meshG.vertices[meshG.triangles].mean(axis=1)
    Fc = pmap.F(c[:, 0])
    Fpc = pmap.Fprime(c[:, 0])
    B = pmap.B(c[:, 0], c[:, 1])
    flux = np.einsum("tde,tae->tad", B, grads)  # B grad(phi_a)
    test = grads / Fc[:, None, None]
    test[:, :, 0] -= (Fpc / Fc**2)[:, None] / 3.0  # phi_b(centroid) = 1/3
    local = np.einsum("tbd,tad->tba", test, flux) * areas[:, None, None]
    A = _scatter(meshG, local)

    top = meshG.edges_tagged(TOP)
    p = meshG.vertices[top[:, 0]]
    q = meshG.vertices[top[:, 1]]
    swap = q[:, 0] < p[:, 0]
    a = np.where(swap, top[:, 1], top[:, 0])
    b = np.where(swap, top[:, 0], top[:, 1])
    ya, yb = meshG.vertices[a, 0], meshG.vertices[b, 0]
    za, zb = meshG.vertices[a, 1], meshG.vertices[b, 1]
    dy = yb - ya
    slope = (zb - za) / dy
    gx, gw = np.polynomial.legendre.leggauss(2)
    rhs = np.zeros(meshG.n_vertices)
    for xi, w in zip(0.5 * (gx + 1.0), 0.5 * gw):
        t = ya + xi * dy
        F = pmap.F(t)
        Gh = za + xi * (zb - za)
        g = -(pmap.Fprime(t) * Gh + F * slope) / F * w * dy
        np.add.at(rhs, a, g * (1.0 - xi))
        np.add.at(rhs, b, g * xi)
    red = apply_periodic(A, rhs, pairing, meshG)
    weights = red.prolongation().T @ lumped_mass(meshG)
    return TransformedSystem(meshG, pairing, A, rhs, red, np.asarray(weights))


def solve_transformed(system: TransformedSystem, tol: float = 1e-10) -> FemSolution:
    """Bordered solve ``[A m; m^T 0] [U; lam] = [S; 0]`` enforcing zero mean."""
    A = system.matrix
    m = system.weights
    S = system.rhs
    n = A.shape[0]
    bnorm = np.linalg.norm(S)
    if bnorm == 0.0:
        return FemSolution(system.mesh, np.zeros(system.mesh.n_vertices), "periodic+zero-mean", [0.0])
    K = sp.bmat([[A, sp.csr_matrix(m[:, None])], [sp.csr_matrix(m[None, :]), None]], format="csc")
    rhs = np.append(S, 0.0)
    history = []
    if n < DENSE_LIMIT:
        sol = np.linalg.solve(K.toarray(), rhs)
    else:
        ilu = spla.spilu(K, drop_tol=1e-5, fill_factor=20)
        prec = spla.LinearOperator(K.shape, ilu.solve)

        def record(xk):
            history.append(np.linalg.norm(K @ xk - rhs) / bnorm)

        sol, info = spla.bicgstab(K, rhs, rtol=tol, atol=0.0, M=prec, maxiter=10 * n, callback=record)
        if info != 0:
            raise ConvergenceError(f"BiCGSTAB did not converge (info={info})", history)
    res = float(np.linalg.norm(K @ sol - rhs) / bnorm)
    history.append(res)
    if not np.isfinite(res) or res > max(tol, 1e-12) * 10:
        raise ConvergenceError(f"transformed solve residual {res:.3e} exceeds tol {tol:g}", history)
    U = system.reduced.expand(sol[:n])
    lm = lumped_mass(system.mesh)
    U = U - np.dot(lm, U) / lm.sum()
    return FemSolution(system.mesh, U, "periodic+zero-mean", history)


def mapped_mesh(meshG: TriMesh, pmap: PullbackMap) -> TriMesh:
    """Image of a layered reference mesh under ``(z1, z2) -> (z1, F(z1) z2)``, same connectivity."""
    v = meshG.vertices
    F = pmap.F(v[:, 0])
    nz = meshG.nz
    # keep the two periodic ends at identical heights
    last = meshG.ncols * (nz + 1)
    F[last:last + nz + 1] = F[:nz + 1]
    verts = np.column_stack([v[:, 0], F * v[:, 1]])
    mesh = TriMesh(verts, meshG.triangles, meshG.boundary_edges, meshG.edge_tags,
                   columns=meshG.columns, nz=nz, rising=meshG.rising)
    if np.any(mesh.signed_areas() <= 0):
        raise ValueError("mapped mesh has inverted triangles")
    return mesh


@dataclass(frozen=True)
class Discrepancy:
    ny: int
    nz: int
    l2_rel: float
    h1_rel: float
    l2_abs: float
    h1_abs: float


def _norms(mesh, u):
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    l2 = float(np.sqrt(max(u @ (M @ u), 0.0)))
    return l2, float(np.sqrt(l2**2 + max(u @ (K @ u), 0.0)))


def equivalence_check(G: AdmissibleProfile, Ghat: AdmissibleProfile, ny: int = 128, nz: int | None = None,
                      tol: float = 1e-10):
    """Compare the transformed solution with the composed direct solution.

    The direct problem is solved on the image of the reference mesh, so the
    composition is evaluated at matching vertices.  Relative norms fall back
    to absolute ones when the reference solution vanishes.
    Returns ``(Discrepancy, U, composed)``.
    """
    nz = ny // 2 if nz is None else nz
    pmap = build_pullback(G, Ghat)
    meshG, pairing = mesh_cell(cell_at(G.spec, 0.0), ny, nz)
    U = solve_transformed(assemble_transformed(meshG, pairing, pmap), tol)
    meshH = mapped_mesh(meshG, pmap)
    Xhat = solve_cell(meshH, pairing, tol).values
    v = meshG.vertices
    pts = np.column_stack([v[:, 0], pmap.F(v[:, 0]) * v[:, 1]])
    comp = meshH.interpolate(Xhat, pts)
    lm = lumped_mass(meshG)
    comp = comp - np.dot(lm, comp) / lm.sum()
    l2, h1 = _norms(meshG, U.dofs - comp)
    rl2, rh1 = _norms(meshG, comp)
    rep = Discrepancy(ny, nz, l2 / rl2 if rl2 > 0 else l2, h1 / rh1 if rh1 > 0 else h1, l2, h1)
    return rep, U, comp


def observed_order(reports, attr="h1_rel"):
    """Least-squares slope of ``log(err)`` against ``log(1/ny)``."""
    ny = np.array([r.ny for r in reports], float)
    e = np.array([getattr(r, attr) for r in reports], float)
    if np.any(e <= 0):
        return float("nan")
    return float(np.polyfit(np.log(1.0 / ny), np.log(e), 1)[0])


def write_discrepancy_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ny", "nz", "l2_rel", "h1_rel"])
        for r in reports:
            w.writerow([r.ny, r.nz, f"{r.l2_rel:.10e}", f"{r.h1_rel:.10e}"])


def x_continuity_probe(profile: ProfileSpec, x: float, deltas, ny: int = 64, nz: int = 32, tol: float = 1e-10):
    """Difference quotients ``||X(x+d) o pi - X(x)||_H1 / d`` on ``Y*(x)``.

    ``pi`` is height-fraction matching; both cells share the layered vertex
    numbering, so the pulled-back values are read off vertex by vertex.
    Returns a list of ``(delta, norm, norm / delta)``.
    """
    deltas = [float(d) for d in deltas]
    if any(d == 0.0 for d in deltas):
        raise ValueError("delta = 0 is not a valid increment")
    for d in deltas:
        if not 0.0 <= x + d <= 1.0:
            raise ValueError(f"x + delta = {x + d} outside [0, 1]")
    base = solve_cell_at(profile, x, ny, nz, tol)
    out = []
    for d in deltas:
        other = solve_cell_at(profile, x + d, ny, nz, tol)
        _, h1 = _norms(base.mesh, other.values - base.values)
        out.append((d, h1, h1 / abs(d)))
    return out
