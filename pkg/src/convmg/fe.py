"""P1 finite elements on one level: triangle integrals, operator, mass matrices.

The operator is applied matrix-free as

    A_kappa u = sum_k Ups_k * (u star K_k)

where ``Ups_k`` holds, for every interior vertex, the integral of the
coefficient over its ``k``-th adjacent triangle and ``K_k`` is the 3x3 table of
constant gradient products on that triangle.  A conventional element-by-element
assembly is kept as the reference matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import kernels
from .grid import TRIANGLE_CELLS, TRIANGLES, GridLevel

__all__ = [
    "STENCIL",
    "TriangleIntegrals",
    "extend_kappa",
    "cell_integrals",
    "triangle_integrals",
    "coarsen_triangle_integrals",
    "operator_stencil",
    "apply_operator",
    "assemble_matrix",
    "assemble_dense",
    "rhs_vector",
    "l2_mass_matrix",
    "h1_mass_matrix",
    "h1_norm",
    "l2_norm",
    "energy_norm",
]

DENSE_LIMIT = 10_000


def _barycentric_gradients(verts) -> np.ndarray:
    """Gradients of the three barycentric coordinates, shape ``(3, 2)``."""
    M = np.column_stack([np.ones(3), np.asarray(verts, dtype=float)])
    C = np.linalg.inv(M)
    return C[1:, :].T


def _stencil_constants() -> np.ndarray:
    """Gradient products of the owner hat with its neighbours, per triangle.

    Shape ``(6, 3, 3)`` indexed ``[k, dx + 1, dy + 1]``, for unit mesh size.
    """
    table = np.zeros((6, 3, 3))
    for k, tri in enumerate(TRIANGLES):
        g = _barycentric_gradients(tri)
        for a, (dx, dy) in enumerate(tri):
            table[k, dx + 1, dy + 1] = g[0] @ g[a]
    return table


STENCIL = _stencil_constants()


def operator_stencil(level: GridLevel) -> np.ndarray:
    """Stencil constants scaled to the level's mesh size."""
    return STENCIL / level.mesh_size**2


@dataclass(frozen=True)
class TriangleIntegrals:
    """Per-vertex integrals of the coefficient over the six adjacent triangles.

    ``data`` has shape ``(6, m, m)``.  ``lower``/``upper`` hold the integral over
    every triangle of the mesh, indexed by cell, and are what the classical
    coarsening works on.
    """

    level: GridLevel
    data: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


def extend_kappa(kappa, level: GridLevel) -> np.ndarray:
    """Nodal coefficient on the extended ``(n+1, n+1)`` grid.

    Interior-only input is extended to the boundary ring by copying the
    nearest interior value.
    """
    kappa = np.asarray(kappa, dtype=float)
    n = level.cells_per_side
    if kappa.size == (n + 1) ** 2:
        return kappa.reshape(n + 1, n + 1)
    if kappa.size == level.dof:
        return np.pad(kappa.reshape(level.shape), 1, mode="edge")
    raise ValueError(f"coefficient with {kappa.size} entries does not fit level {level.level}")


def cell_integrals(kappa, level: GridLevel) -> tuple[np.ndarray, np.ndarray]:
    """Exact integrals of the P1 interpolant over every lower / upper triangle."""
    e = extend_kappa(kappa, level)
    w = level.mesh_size**2 / 6.0  # area / 3
    lower = w * (e[:-1, :-1] + e[1:, :-1] + e[1:, 1:])
    upper = w * (e[:-1, :-1] + e[1:, 1:] + e[:-1, 1:])
    return lower, upper


def _gather(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    n = lower.shape[0]
    m = n - 1
    data = np.empty((6, m, m))
    for k, (cx, cy, kind) in enumerate(TRIANGLE_CELLS):
        src = lower if kind == "lower" else upper
        # interior vertex (i, j) = (a+1, b+1) owns cell (i+cx, j+cy)
        data[k] = src[1 + cx : 1 + cx + m, 1 + cy : 1 + cy + m]
    return data


def triangle_integrals(kappa, level: GridLevel) -> TriangleIntegrals:
    lower, upper = cell_integrals(kappa, level)
    return TriangleIntegrals(level, _gather(lower, upper), lower, upper)


def coarsen_triangle_integrals(ti: TriangleIntegrals, coarse: GridLevel) -> TriangleIntegrals:
    """Integrals on the next coarser mesh, by summing the four sub-triangles."""
    if ti.lower is None:
        raise ValueError("classical coarsening needs the per-cell integrals")
    if 2 * coarse.cells_per_side != ti.level.cells_per_side:
        raise ValueError("levels are not adjacent")
    lo, up = ti.lower, ti.upper
    lower = lo[0::2, 0::2] + lo[1::2, 0::2] + lo[1::2, 1::2] + up[1::2, 0::2]
    upper = up[0::2, 0::2] + up[0::2, 1::2] + up[1::2, 1::2] + lo[0::2, 1::2]
    return TriangleIntegrals(coarse, _gather(lower, upper), lower, upper)


def apply_operator(ti: TriangleIntegrals, u) -> np.ndarray:
    """``A_kappa u``; the result has the shape of ``u`` (flat or 2D)."""
    level = ti.level
    u = np.asarray(u, dtype=float)
    u2 = level.as_grid(u)
    out = kernels.apply_stencil(ti.data, u2, operator_stencil(level))
    return out if u.ndim == 2 else out.ravel()


# -- reference assembly -------------------------------------------------------

def _local_stiffness(verts) -> np.ndarray:
    """``grad phi_a . grad phi_b`` on a unit-size triangle (edge-vector formula)."""
    p = np.asarray(verts, dtype=float)
    area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
    grads = []
    for a in range(3):
        b, c = p[(a + 1) % 3], p[(a + 2) % 3]
        # rotate the opposite edge c - b by -90 degrees
        grads.append(np.array([b[1] - c[1], c[0] - b[0]]) / area2)
    G = np.array(grads)
    return G @ G.T


_LOWER = ((0, 0), (1, 0), (1, 1))
_UPPER = ((0, 0), (1, 1), (0, 1))
_LOCAL = {"lower": _local_stiffness(_LOWER), "upper": _local_stiffness(_UPPER)}
_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0  # times area


def _element_integrals(kappa, level):
    """Triangle integrals of the P1 coefficient by the edge-midpoint rule."""
    e = extend_kappa(kappa, level)
    area = level.mesh_size**2 / 2.0

    def rule(a, b, c):
        return area * ((a + b) / 2 + (b + c) / 2 + (c + a) / 2) / 3.0

    lower = rule(e[:-1, :-1], e[1:, :-1], e[1:, 1:])
    upper = rule(e[:-1, :-1], e[1:, 1:], e[:-1, 1:])
    return lower, upper


def _assemble(level: GridLevel, weights_lower, weights_upper, local_lower, local_upper):
    n = level.cells_per_side
    m = n - 1
    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rows, cols, vals = [], [], []
    for verts, weights, local in ((_LOWER, weights_lower, local_lower), (_UPPER, weights_upper, local_upper)):
        gi = [ci + dx for dx, _ in verts]
        gj = [cj + dy for _, dy in verts]
        for a in range(3):
            for b in range(3):
                ia, ja, ib, jb = gi[a], gj[a], gi[b], gj[b]
                keep = (ia >= 1) & (ia <= m) & (ja >= 1) & (ja <= m) & (ib >= 1) & (ib <= m) & (jb >= 1) & (jb <= m)
                rows.append(((ia - 1) * m + ja - 1)[keep])
                cols.append(((ib - 1) * m + jb - 1)[keep])
                vals.append((local[a, b] * weights)[keep])
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m))
    return A.tocsr()


def assemble_matrix(level: GridLevel, kappa=None, cells=None) -> sp.csr_matrix:
    """Element-by-element stiffness matrix ``(a(phi_j, phi_i))``.

    The coefficient is given either as nodal values (interior or extended)
    or directly as per-triangle integrals ``cells = (lower, upper)``.
    """
    if cells is None:
        if kappa is None:
            raise ValueError("need either nodal kappa or cell integrals")
        cells = _element_integrals(kappa, level)
    lower, upper = cells
    h2 = level.mesh_size**2
    return _assemble(level, lower, upper, _LOCAL["lower"] / h2, _LOCAL["upper"] / h2)


def assemble_dense(kappa, level: GridLevel) -> np.ndarray:
    if level.dof > DENSE_LIMIT:
        raise ValueError(f"refusing to materialise a {level.dof}x{level.dof} dense matrix")
    return assemble_matrix(level, kappa).toarray()


@lru_cache(maxsize=None)
def _l2_mass(n: int) -> sp.csr_matrix:
    level = GridLevel(0, n)
    area = np.full((n, n), level.mesh_size**2 / 2.0)
    return _assemble(level, area, area, _LOCAL_MASS, _LOCAL_MASS)


@lru_cache(maxsize=None)
def _h1_mass(n: int) -> sp.csr_matrix:
    level = GridLevel(0, n)
    stiff = assemble_matrix(level, np.ones((n + 1) ** 2))
    return (_l2_mass(n) + stiff).tocsr()


def l2_mass_matrix(level: GridLevel) -> sp.csr_matrix:
    return _l2_mass(level.cells_per_side)


def h1_mass_matrix(level: GridLevel) -> sp.csr_matrix:
    """``(phi_k, phi_j)_{H^1}``: L2 mass plus the unit-coefficient stiffness."""
    return _h1_mass(level.cells_per_side)


def rhs_vector(level: GridLevel, f=1.0) -> np.ndarray:
    """Load vector ``(int f phi_i)``; ``f`` is a constant or interior nodal values."""
    if np.ndim(f) == 0:
        return np.full(level.dof, float(f) * level.mesh_size**2)
    f = np.asarray(f, dtype=float).ravel()
    if f.size != level.dof:
        raise ValueError("nodal right-hand side does not match the level")
    return l2_mass_matrix(level) @ f


def _quad_form(M, u, level) -> float:
    u = np.asarray(u, dtype=float).ravel()
    if u.size != level.dof:
        raise ValueError(f"expected {level.dof} entries, got {u.size}")
    return float(max(u @ (M @ u), 0.0))


def h1_norm(u, level: GridLevel) -> float:
    return np.sqrt(_quad_form(h1_mass_matrix(level), u, level))


def l2_norm(u, level: GridLevel) -> float:
    return np.sqrt(_quad_form(l2_mass_matrix(level), u, level))


def energy_norm(u, ti: TriangleIntegrals) -> float:
    u = np.asarray(u, dtype=float).ravel()
    return float(np.sqrt(max(u @ apply_operator(ti, u), 0.0)))
