"""Structured layered triangulations of cells and thin domains, and 1D meshes.

Every 2D mesh here is a graph-bounded region split into columns; inside a
column the vertices sit at fixed fractions ``k/nz`` of the local height, so
vertex ``(i, k)`` has index ``i*(nz+1) + k`` and the two triangles of quad
``(i, k)`` are ``2*(i*nz + k)`` and ``2*(i*nz + k) + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshBudgetError, MeshQualityError
from .geometry import CellDomain, ThinDomainSpec

TOP, BOTTOM, LEFT, RIGHT = "TOP", "BOTTOM", "LEFT", "RIGHT"

# Fraction-layered meshes of cells with sloped roofs cannot reach 15 degrees at
# the resolutions the convergence study needs (column width ~ layer height / 6).
DEFAULT_MIN_ANGLE = 2.0
MAX_TRIANGLES = 20_000_000


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    columns: np.ndarray = field(default=None, repr=False)
    nz: int = 0
    rising: np.ndarray = field(default=None, repr=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def ncols(self):
        return len(self.columns) - 1

    def vertex_index(self, i, k):
        return np.asarray(i) * (self.nz + 1) + np.asarray(k)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        return np.abs(self.signed_areas())

    def edges_tagged(self, tag):
        return self.boundary_edges[self.edge_tags == tag]

    def min_angles(self):
        """Smallest interior angle (degrees) of every triangle."""
        p = self.vertices[self.triangles]
        out = np.full(len(p), np.inf)
        for a in range(3):
            u = p[:, (a + 1) % 3] - p[:, a]
            v = p[:, (a + 2) % 3] - p[:, a]
            cosang = np.einsum("ij,ij->i", u, v) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
            )
            out = np.minimum(out, np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return out

    def h(self):
        """Longest edge length."""
        p = self.vertices[self.triangles]
        return float(max(np.linalg.norm(p[:, (a + 1) % 3] - p[:, a], axis=1).max() for a in range(3)))

    def top_vertices(self):
        return np.arange(self.ncols + 1) * (self.nz + 1) + self.nz

    def locate(self, pts, tol=1e-9):
        """Triangle index and barycentric weights for points ``(u, v)``.

        Points are clamped into the mesh if they lie outside by at most
        ``tol`` (relative to the local column height); further out raises
        ``ValueError``.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        u, v = pts[:, 0], pts[:, 1]
        cols = self.columns
        span = cols[-1] - cols[0]
        if np.any(u < cols[0] - tol * span) or np.any(u > cols[-1] + tol * span):
            raise ValueError("point outside the mesh columns")
        u = np.clip(u, cols[0], cols[-1])
        i = np.clip(np.searchsorted(cols, u, side="right") - 1, 0, self.ncols - 1)
        s = (u - cols[i]) / (cols[i + 1] - cols[i])
        nz = self.nz
        bot = (1 - s) * self.vertices[i * (nz + 1), 1] + s * self.vertices[(i + 1) * (nz + 1), 1]
        top = (1 - s) * self.vertices[i * (nz + 1) + nz, 1] + s * self.vertices[(i + 1) * (nz + 1) + nz, 1]
        t = (v - bot) / (top - bot)
        if np.any(t < -tol) or np.any(t > 1 + tol):
            bad = int(np.argmax(np.maximum(-t, t - 1)))
            raise ValueError(f"point {pts[bad]} outside the mesh (height fraction {t[bad]:.3e})")
        t = np.clip(t, 0.0, 1.0)
        v = bot + t * (top - bot)
        k = np.clip(np.floor(t * nz).astype(int), 0, nz - 1)
        q = 2 * (i * nz + k)
        best_tri = q.copy()
        best_bary = None
        worst = None
        for off in (0, 1):
            tri = q + off
            bary = _barycentric(self.vertices[self.triangles[tri]], np.column_stack([u, v]))
            viol = np.maximum(0.0, -bary.min(axis=1))
            if best_bary is None:
                best_bary, worst = bary, viol
            else:
                take = viol < worst
                best_tri = np.where(take, tri, best_tri)
                best_bary = np.where(take[:, None], bary, best_bary)
                worst = np.minimum(viol, worst)
        return best_tri, best_bary

    def interpolate(self, values, pts, tol=1e-9):
        tri, bary = self.locate(pts, tol)
        return np.einsum("ij,ij->i", np.asarray(values)[self.triangles[tri]], bary)


def _barycentric(tri_pts, pts):
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    v0, v1, v2 = b - a, c - a, pts - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


@dataclass(frozen=True, eq=False)
class PeriodicPairing:
    pairs: np.ndarray  # (n, 2): left vertex, right vertex

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True, eq=False)
class Interval1DMesh:
    nodes: np.ndarray
    order: int = 1

    @property
    def elements(self):
        n = len(self.nodes) - 1
        return np.column_stack([np.arange(n), np.arange(1, n + 1)])

    @property
    def n_elements(self):
        return len(self.nodes) - 1

    @property
    def dof_coords(self):
        if self.order == 1:
            return self.nodes.copy()
        out = np.empty(2 * len(self.nodes) - 1)
        out[0::2] = self.nodes
        out[1::2] = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        return out

    @property
    def n_dofs(self):
        return len(self.nodes) if self.order == 1 else 2 * len(self.nodes) - 1

    @property
    def element_dofs(self):
        """Per-element DOF indices: ``[left, right]`` or ``[left, mid, right]``."""
        j = np.arange(self.n_elements)
        if self.order == 1:
            return np.column_stack([j, j + 1])
        return np.column_stack([2 * j, 2 * j + 1, 2 * j + 2])


def _layered(columns, floor, top, nz, min_angle):
    """Build a fraction-layered mesh between ``floor`` and ``top`` sampled on ``columns``."""
    ncols = len(columns) - 1
    frac = np.arange(nz + 1) / nz
    z = floor[:, None] + frac[None, :] * (top - floor)[:, None]
    verts = np.column_stack([np.repeat(columns, nz + 1), z.ravel()])

    thick = top - floor
    width = np.diff(columns)
    rising = np.diff(thick) > 1e-9 * width

    i, k = np.meshgrid(np.arange(ncols), np.arange(nz), indexing="ij")
    i, k = i.ravel(), k.ravel()
    ll = i * (nz + 1) + k
    lr = (i + 1) * (nz + 1) + k
    ur = lr + 1
    ul = ll + 1
    r = rising[i]
    # rising column: cut along UL-LR (the short diagonal of the sheared quad)
    t0 = np.where(r[:, None], np.column_stack([ll, lr, ul]), np.column_stack([ll, lr, ur]))
    t1 = np.where(r[:, None], np.column_stack([lr, ur, ul]), np.column_stack([ll, ur, ul]))
    tris = np.empty((2 * len(i), 3), dtype=np.int64)
    tris[0::2] = t0
    tris[1::2] = t1

    cidx = np.arange(ncols)
    kidx = np.arange(nz)
    bottom = np.column_stack([cidx * (nz + 1), (cidx + 1) * (nz + 1)])
    right = np.column_stack([ncols * (nz + 1) + kidx, ncols * (nz + 1) + kidx + 1])
    topedges = np.column_stack([(cidx + 1) * (nz + 1) + nz, cidx * (nz + 1) + nz])[::-1]
    left = np.column_stack([kidx + 1, kidx])[::-1]
    edges = np.vstack([bottom, right, topedges, left])
    tags = np.array([BOTTOM] * ncols + [RIGHT] * nz + [TOP] * ncols + [LEFT] * nz)

    mesh = TriMesh(verts, tris, edges, tags, columns=np.asarray(columns, float), nz=nz, rising=rising)
    areas = mesh.signed_areas()
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise MeshQualityError(f"inverted or degenerate triangle {bad} (signed area {areas[bad]:.3e})", bad)
    if min_angle:
        angles = mesh.min_angles()
        bad = int(np.argmin(angles))
        if angles[bad] < min_angle:
            raise MeshQualityError(
                f"triangle {bad} has minimum angle {angles[bad]:.2f} deg < {min_angle} deg",
                worst_triangle=bad,
                worst_angle=float(angles[bad]),
            )
    return mesh


def mesh_cell(cell: CellDomain, ny: int, nz: int, min_angle: float = DEFAULT_MIN_ANGLE):
    """Layered mesh of ``Y*(x)`` with ``ny`` columns and ``nz`` layers plus its periodic pairing."""
    if ny < 2 or nz < 2:
        raise ValueError(f"mesh_cell needs ny >= 2 and nz >= 2, got ny={ny}, nz={nz}")
    ys = np.linspace(0.0, cell.L, ny + 1)
    top = np.asarray(cell.roof(ys), dtype=float) * np.ones(ny + 1)
    top[-1] = top[0]
    floor = np.full(ny + 1, cell.floor)
    mesh = _layered(ys, floor, top, nz, min_angle)
    left = np.arange(nz + 1)
    pairing = PeriodicPairing(np.column_stack([left, ny * (nz + 1) + left]))
    return mesh, pairing


def thin_columns(spec: ThinDomainSpec, cells_per_period: int) -> int:
    q = cells_per_period / (spec.epsilon * spec.profile.L)
    return max(1, math.ceil(q - 1e-9))


def mesh_thin(
    spec: ThinDomainSpec,
    cells_per_period: int = 16,
    nz: int = 8,
    min_angle: float = DEFAULT_MIN_ANGLE,
    max_triangles: int = MAX_TRIANGLES,
) -> TriMesh:
    """Layered mesh of the thin domain resolving each oscillation with ``cells_per_period`` columns."""
    if cells_per_period < 8:
        raise ValueError(f"cells_per_period must be >= 8, got {cells_per_period}")
    if nz < 1:
        raise ValueError("nz must be >= 1")
    ncols = thin_columns(spec, cells_per_period)
    ntri = 2 * ncols * nz
    if ntri > max_triangles:
        raise MeshBudgetError(
            f"thin mesh for eps={spec.epsilon:g} would need {ntri:,} triangles "
            f"({ncols:,} columns x {nz} layers), above the budget of {max_triangles:,}"
        )
    x1 = np.linspace(0.0, 1.0, ncols + 1)
    return _layered(x1, np.asarray(spec.lower(x1), float), np.asarray(spec.upper(x1), float), nz, min_angle)


def mesh_interval(n: int, order: int = 1) -> Interval1DMesh:
    if n < 2:
        raise ValueError(f"mesh_interval needs n >= 2, got {n}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    return Interval1DMesh(np.linspace(0.0, 1.0, n + 1), order)


def polygon_area(mesh: TriMesh) -> float:
    return float(mesh.areas().sum())


def dump_mesh(mesh: TriMesh, path) -> None:
    """Write ``vertex x z`` and ``tri i j k`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, z in mesh.vertices:
            fh.write(f"vertex {x:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"tri {a} {b} {c}\n")
