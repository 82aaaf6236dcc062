"""P1 finite elements on layered meshes: assembly, periodic merge, CG solves.

Matrices are :class:`scipy.sparse.csr_matrix`.  The cell problem is solved
in the periodic (merged) space with the constant mode projected out of every
CG iterate; the thin-domain problem ``-lap w + w = f`` with natural boundary
conditions is solved with Jacobi-preconditioned CG.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, MeshQualityError
from .mesh import TOP, PeriodicPairing, TriMesh


def basis_gradients(mesh: TriMesh):
    """Constant gradients of the three P1 basis functions on every triangle.

    Returns ``(grads, areas)`` with ``grads`` of shape ``(T, 3, 2)``.
    """
    p = mesh.vertices[mesh.triangles]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (
        p[:, 1, 1] - p[:, 0, 1]
    )
    if np.any(np.abs(area2) <= 1e-300):
        bad = int(np.argmin(np.abs(area2)))
        raise MeshQualityError(f"degenerate triangle {bad} (zero area)", bad)
    grads = np.empty((len(p), 3, 2))
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        # grad(lambda_a) = rot90(p_c - p_b) / (2 A), oriented so the sign of area2 cancels
        grads[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / area2
        grads[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / area2
    return grads, 0.5 * np.abs(area2)


def _scatter(mesh, local):
    n = mesh.n_vertices
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


@lru_cache(maxsize=32)
def assemble_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    """``A_ij = sum_T int_T grad(phi_i) . grad(phi_j)`` (exact for P1)."""
    grads, areas = basis_gradients(mesh)
    local = np.einsum("tad,tbd->tab", grads, grads) * areas[:, None, None]
    return _scatter(mesh, local)


@lru_cache(maxsize=32)
def assemble_mass(mesh: TriMesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (area/6 diagonal, area/12 off-diagonal)."""
    areas = mesh.areas()
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise MeshQualityError(f"degenerate triangle {bad} (zero area)", bad)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = areas[:, None, None] * ref[None]
    return _scatter(mesh, local)


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    return np.asarray(assemble_mass(mesh).sum(axis=1)).ravel()


def neumann_rhs_cell(mesh: TriMesh) -> np.ndarray:
    """Load vector of the cell datum ``dX/dN = N_1`` on the top boundary.

    Integrated exactly on the polygonal roof: an edge from ``p`` to ``q``
    (``y_q > y_p``) has ``N_1 |e| = -(z_q - z_p)``, split equally between its
    endpoints.  The entries therefore telescope to zero over a period.
    """
    top = mesh.edges_tagged(TOP)
    if len(top) == 0:
        raise ValueError("mesh has no TOP boundary edges")
    p = mesh.vertices[top[:, 0]]
    q = mesh.vertices[top[:, 1]]
    swap = q[:, 0] < p[:, 0]
    a = np.where(swap, top[:, 1], top[:, 0])
    b = np.where(swap, top[:, 0], top[:, 1])
    dz = mesh.vertices[b, 1] - mesh.vertices[a, 1]
    F = np.zeros(mesh.n_vertices)
    np.add.at(F, a, -0.5 * dz)
    np.add.at(F, b, -0.5 * dz)
    return F


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """Periodic system after merging RIGHT DOFs into their LEFT partners."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    merge: np.ndarray  # full index -> reduced index
    keep: np.ndarray  # reduced index -> representative full index

    @property
    def n_full(self):
        return len(self.merge)

    def expand(self, u_red):
        return np.asarray(u_red)[self.merge]

    def restrict(self, u_full):
        return np.asarray(u_full)[self.keep]

    def prolongation(self):
        n = self.n_full
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.merge)), shape=(n, len(self.keep)))


def merge_map(n: int, pairing: PeriodicPairing):
    pairs = np.asarray(pairing.pairs)
    left, right = pairs[:, 0], pairs[:, 1]
    if len(np.unique(left)) != len(left) or len(np.unique(right)) != len(right):
        raise ValueError("periodic pairing is not a bijection")
    if np.intersect1d(left, right).size:
        raise ValueError("periodic pairing maps a vertex onto itself")
    target = np.arange(n)
    target[right] = left
    keep = np.setdiff1d(np.arange(n), right)
    renum = np.full(n, -1)
    renum[keep] = np.arange(len(keep))
    return renum[target], keep


def apply_periodic(matrix, rhs, pairing: PeriodicPairing, mesh: TriMesh | None = None) -> ReducedSystem:
    """Merge paired DOFs by summing rows and columns."""
    n = matrix.shape[0]
    if mesh is not None:
        pv = mesh.vertices[np.asarray(pairing.pairs)]
        if np.max(np.abs(pv[:, 0, 1] - pv[:, 1, 1])) > 1e-12:
            raise ValueError("periodic pairing mismatch: paired vertices at different heights")
    merge, keep = merge_map(n, pairing)
    P = sp.csr_matrix((np.ones(n), (np.arange(n), merge)), shape=(n, len(keep)))
    A = (P.T @ matrix @ P).tocsr()
    A.eliminate_zeros()
    return ReducedSystem(A, P.T @ np.asarray(rhs, dtype=float), merge, keep)


def conjugate_gradient(A, b, tol=1e-10, x0=None, maxiter=None, precond=None, null_weights=None):
    """Preconditioned CG to ``||A x - b|| <= tol ||b||``.

    With ``null_weights`` the system is treated as singular with constant
    kernel: the iterate is shifted to zero weighted mean after every step and
    the residual is kept orthogonal to constants.
    Returns ``(x, history)``; raises :class:`ConvergenceError` on failure.
    """
    n = len(b)
    b = np.asarray(b, dtype=float)
    maxiter = 10 * n if maxiter is None else maxiter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    w = None if null_weights is None else np.asarray(null_weights, dtype=float)

    def project(v):
        return v - np.dot(w, v) / w.sum() if w is not None else v

    def orth(r):
        return r - r.mean() if w is not None else r

    x = project(x)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), [0.0]
    r = orth(b - A @ x)
    history = [np.linalg.norm(r) / bnorm]
    if history[-1] <= tol:
        return x, history
    z = r if precond is None else precond * r
    p = z.copy()
    rz = np.dot(r, z)
    for _ in range(maxiter):
        Ap = A @ p
        pAp = np.dot(p, Ap)
        if pAp <= 0:
            raise ConvergenceError("CG breakdown: non-positive curvature", history)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        r = orth(r)
        history.append(np.linalg.norm(r) / bnorm)
        if history[-1] <= tol:
            x = project(x)
            # confirm with the true residual
            true_res = np.linalg.norm(orth(b - A @ x)) / bnorm
            if true_res <= tol:
                history[-1] = true_res
                return x, history
            # recursive residual drifted: restart from the true one
            r = orth(b - A @ x)
            z = r if precond is None else precond * r
            p = z.copy()
            rz = np.dot(r, z)
            continue
        z = r if precond is None else precond * r
        rz_new = np.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        if w is not None:
            x = project(x)
    raise ConvergenceError(
        f"CG did not reach tol={tol:g} in {maxiter} iterations (residual {history[-1]:.3e})", history
    )


@dataclass(frozen=True, eq=False)
class FemSolution:
    mesh: TriMesh
    dofs: np.ndarray
    constraint: str = "none"  # none | zero-mean | periodic+zero-mean
    history: list = field(default_factory=list, repr=False)

    def integral(self):
        return float(lumped_mass(self.mesh) @ self.dofs)

    def gradients(self):
        grads, _ = basis_gradients(self.mesh)
        return np.einsum("tad,ta->td", grads, self.dofs[self.mesh.triangles])


@dataclass(frozen=True, eq=False)
class CellSolution:
    x: float
    L: float
    solution: FemSolution
    grad: np.ndarray  # (T, 2): dX/dy, dX/dz per triangle
    r: float
    p: float
    pairing: PeriodicPairing = field(default=None, repr=False)

    @property
    def mesh(self):
        return self.solution.mesh

    @property
    def values(self):
        return self.solution.dofs


def cell_coefficients(mesh: TriMesh, grad: np.ndarray, L: float):
    """``r = (1/L) sum_T |T| (1 - dX/dy)`` and ``p = |polygon| / L``."""
    areas = mesh.areas()
    r = float(np.dot(areas, 1.0 - grad[:, 0])) / L
    p = float(areas.sum()) / L
    return r, p


def solve_cell(mesh: TriMesh, pairing: PeriodicPairing, tol: float = 1e-10, x: float = float("nan"),
               x0=None, maxiter=None) -> CellSolution:
    """Solve the periodic cell problem with zero mean.

    The merged singular system is solved by Jacobi-preconditioned CG with the
    constant mode projected out each iteration (lumped-mass weights); the
    result is shifted to exact zero mean afterwards.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    K = assemble_stiffness(mesh)
    F = neumann_rhs_cell(mesh)
    red = apply_periodic(K, F, pairing, mesh)
    m_full = lumped_mass(mesh)
    m_red = red.prolongation().T @ m_full
    L = float(mesh.columns[-1] - mesh.columns[0])
    if np.max(np.abs(red.rhs)) == 0.0:
        X = np.zeros(mesh.n_vertices)
        history = [0.0]
    else:
        diag = red.matrix.diagonal()
        start = None if x0 is None else red.restrict(x0)
        u, history = conjugate_gradient(
            red.matrix, red.rhs, tol=tol, x0=start, maxiter=maxiter, precond=1.0 / diag, null_weights=m_red
        )
        X = red.expand(u)
        X = X - np.dot(m_full, X) / m_full.sum()
    sol = FemSolution(mesh, X, "periodic+zero-mean", history)
    grad = sol.gradients()
    r, p = cell_coefficients(mesh, grad, L)
    return CellSolution(x, L, sol, grad, r, p, pairing)


def load_vector(mesh: TriMesh, f) -> np.ndarray:
    """``F_i = int f phi_i`` with the 3-point edge-midpoint rule per triangle."""
    p = mesh.vertices[mesh.triangles]
    areas = mesh.areas()
    F = np.zeros(mesh.n_vertices)
    fm = []
    for a in range(3):
        mid = 0.5 * (p[:, (a + 1) % 3] + p[:, (a + 2) % 3])  # midpoint opposite vertex a
        fm.append(np.broadcast_to(np.asarray(f(mid[:, 0], mid[:, 1]), dtype=float), areas.shape))
    for a in range(3):
        # phi_a = 1/2 at the two midpoints adjacent to vertex a, 0 at the opposite one
        contrib = areas / 6.0 * (fm[(a + 1) % 3] + fm[(a + 2) % 3])
        np.add.at(F, mesh.triangles[:, a], contrib)
    return F


def solve_full(mesh: TriMesh, f, tol: float = 1e-10, maxiter=None) -> FemSolution:
    """Solve ``(K + M) w = F`` for the natural-boundary problem ``-lap w + w = f``."""
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    A = (assemble_stiffness(mesh) + assemble_mass(mesh)).tocsr()
    F = load_vector(mesh, f)
    w, history = conjugate_gradient(A, F, tol=tol, maxiter=maxiter, precond=1.0 / A.diagonal())
    return FemSolution(mesh, w, "none", history)


def fem_norms(sol: FemSolution):
    """``{'l2': sqrt(u'Mu), 'h1_semi': sqrt(u'Ku)}`` in the plain Lebesgue measure."""
    u = sol.dofs
    K = assemble_stiffness(sol.mesh)
    M = assemble_mass(sol.mesh)
    return {"l2": float(np.sqrt(max(u @ (M @ u), 0.0))), "h1_semi": float(np.sqrt(max(u @ (K @ u), 0.0)))}
