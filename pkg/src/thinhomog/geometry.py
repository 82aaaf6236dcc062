"""Representative cells and thin domains built from a profile."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .profile import ProfileSpec

EPS0_DEFAULT = 0.5


@dataclass(frozen=True)
class CellDomain:
    """Cell ``{0 < y < L, -b(x) < z < G(x, y)}`` with ``x`` frozen."""

    profile: ProfileSpec
    x: float

    @property
    def L(self):
        return self.profile.L

    @property
    def floor(self):
        return -float(self.profile.b(self.x))

    def roof(self, y):
        return self.profile.G(self.x, y)

    def roof_slope(self, y):
        return self.profile.Gy(self.x, y)

    @property
    def area(self):
        return area(self)


@dataclass(frozen=True)
class ThinDomainSpec:
    """Thin domain ``{0 < x1 < 1, -eps b(x1) < x2 < eps G(x1, x1/eps)}``."""

    epsilon: float
    profile: ProfileSpec

    def upper(self, x1):
        x1 = np.asarray(x1, dtype=float)
        return self.epsilon * self.profile.G(x1, x1 / self.epsilon)

    def lower(self, x1):
        x1 = np.asarray(x1, dtype=float)
        return -self.epsilon * np.broadcast_to(self.profile.b(x1), x1.shape)

    def thickness(self, x1):
        return self.upper(x1) - self.lower(x1)


def cell_at(profile: ProfileSpec, x: float) -> CellDomain:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"cell position x={x} outside [0, 1]")
    return CellDomain(profile, x)


def area(cell: CellDomain, quad_points: int = 64) -> float:
    """``|Y*(x)| = int_0^L (G(x, y) + b(x)) dy`` by composite 3-point Gauss."""
    if quad_points < 2:
        raise ValueError("quad_points must be >= 2")
    edges = np.linspace(0.0, cell.L, quad_points + 1)
    g, w = np.polynomial.legendre.leggauss(3)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    ys = (mid[:, None] + half[:, None] * g[None, :]).ravel()
    ws = (half[:, None] * w[None, :]).ravel()
    height = cell.roof(ys) - cell.floor
    return float(np.dot(ws, height))


def thin_domain(profile: ProfileSpec, epsilon: float, eps0: float = EPS0_DEFAULT) -> ThinDomainSpec:
    epsilon = float(epsilon)
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if epsilon > eps0:
        raise ValueError(f"epsilon={epsilon} exceeds the configured ceiling eps0={eps0}")
    return ThinDomainSpec(epsilon, profile)
