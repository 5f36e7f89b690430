"""Uniform finite-difference grids on boxes with homogeneous Dirichlet data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .function_model import FunctionModel

__all__ = [
    "Mesh",
    "BumpGeometry",
    "MeshError",
    "build_mesh",
    "unit_ball_volume",
    "bump_norm_constant",
    "bump_geometry",
    "h01_norm_sq",
    "l2_norm_sq",
    "linf_norm",
    "integrate_composed",
    "bump",
    "write_nodal_csv",
]


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    extent: tuple  # ((a1, b1),) or ((a1, b1), (a2, b2))
    resolution: int
    h: float
    shape: tuple  # interior nodes per axis
    weights: np.ndarray
    stiffness: sp.csr_matrix = field(repr=False)
    measure: float

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def coordinates(self) -> np.ndarray:
        """Interior node coordinates, shape (size, dim), C order."""
        axes = [a + self.h * np.arange(1, n + 1) for (a, _), n in zip(self.extent, self.shape)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise MeshError(f"field of shape {u.shape} does not conform to mesh with {self.size} nodes")
        return u

    def stiffness_bound(self) -> float:
        """Gershgorin bound on the spectrum of the stiffness matrix."""
        return 4.0 * self.dim * self.h ** (self.dim - 2)


def _lap1d(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def build_mesh(dim: int, extent: Sequence[Sequence[float]] | Sequence[float], resolution: int) -> Mesh:
    """Uniform grid with ``resolution`` cells along the longest axis.

    ``extent`` is ``(a, b)`` in 1D or ``((a1, b1), (a2, b2))`` in 2D.  The
    spacing is shared between axes, so every side length must be an integer
    multiple of it.
    """
    if dim not in (1, 2):
        raise MeshError(f"dim={dim} unsupported (1 or 2)")
    if resolution < 8:
        raise MeshError("resolution must be at least 8")
    if dim == 1 and len(extent) == 2 and np.isscalar(extent[0]):
        extent = (tuple(extent),)
    extent = tuple((float(a), float(b)) for a, b in extent)
    if len(extent) != dim:
        raise MeshError(f"extent {extent} does not match dim={dim}")
    lengths = [b - a for a, b in extent]
    if min(lengths) <= 0:
        raise MeshError(f"degenerate extent {extent}")
    h = max(lengths) / resolution
    cells = [round(L / h) for L in lengths]
    if any(abs(c * h - L) > 1e-9 * L or c < 2 for c, L in zip(cells, lengths)):
        raise MeshError("side lengths must be integer multiples of the grid spacing")
    shape = tuple(c - 1 for c in cells)
    if dim == 1:
        K = _lap1d(shape[0]) / h
    else:
        Ix, Iy = sp.identity(shape[0]), sp.identity(shape[1])
        K = sp.kron(_lap1d(shape[0]), Iy) + sp.kron(Ix, _lap1d(shape[1]))
    K = sp.csr_matrix(K)
    weights = np.full(int(np.prod(shape)), h ** dim)
    return Mesh(dim, extent, resolution, h, shape, weights, K, float(np.prod(lengths)))


def h01_norm_sq(mesh: Mesh, u) -> float:
    u = mesh.check(u)
    return float(u @ (mesh.stiffness @ u))


def l2_norm_sq(mesh: Mesh, u) -> float:
    u = mesh.check(u)
    return float(mesh.weights @ (u * u))


def linf_norm(mesh: Mesh, u) -> float:
    u = mesh.check(u)
    return float(np.max(np.abs(u))) if u.size else 0.0


def integrate_composed(mesh: Mesh, A: FunctionModel, u) -> float:
    u = mesh.check(u)
    return float(mesh.weights @ A.value(u))


# ---------------------------------------------------------------------------
# radial bump test function
# ---------------------------------------------------------------------------


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def bump_norm_constant(r: float, n: int) -> float:
    """H^1_0 seminorm squared of the unit-amplitude bump, 4 r^{n-2} (1 - 2^{-n}) w_n."""
    return 4.0 * r ** (n - 2) * (1.0 - 2.0 ** (-n)) * unit_ball_volume(n)


@dataclass(frozen=True)
class BumpGeometry:
    x0: tuple
    r: float
    Crn: float
    omega_n: float

    @property
    def inner_volume(self) -> float:
        """Volume of B(x0, r/2)."""
        return (self.r / 2) ** len(self.x0) * self.omega_n


def bump_geometry(mesh: Mesh, x0: Sequence[float] | float | None = None, r: float | None = None) -> BumpGeometry:
    """Ball B(x0, r) inside the box; defaults to the largest centred ball (98%)."""
    if x0 is None:
        x0 = tuple((a + b) / 2 for a, b in mesh.extent)
    elif np.isscalar(x0):
        x0 = (float(x0),)
    x0 = tuple(float(c) for c in x0)
    if len(x0) != mesh.dim:
        raise MeshError("bump centre dimension does not match mesh")
    room = min(min(c - a, b - c) for c, (a, b) in zip(x0, mesh.extent))
    if r is None:
        r = 0.98 * room
    if not r > 0:
        raise MeshError("bump radius must be positive")
    if r > room + 1e-12:
        raise MeshError(f"ball B(x0, {r}) exceeds the domain")
    n = mesh.dim
    return BumpGeometry(x0, float(r), bump_norm_constant(r, n), unit_ball_volume(n))


def bump(mesh: Mesh, geom: BumpGeometry, s: float) -> np.ndarray:
    """Nodal interpolant of the plateau-and-ramp bump of height ``s``."""
    x = mesh.coordinates()
    dist = np.linalg.norm(x - np.asarray(geom.x0), axis=1)
    r = geom.r
    ramp = 2.0 * s / r * (r - dist)
    return np.where(dist <= r / 2, s, np.where(dist < r, ramp, 0.0))


def write_nodal_csv(path, mesh: Mesh, u) -> None:
    u = mesh.check(u)
    coords = mesh.coordinates()
    names = ["x", "y"][: mesh.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["value"])
        for row, val in zip(coords, u):
            w.writerow([f"{c:.17g}" for c in row] + [f"{val:.17g}"])
