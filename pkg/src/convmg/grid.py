"""Nested dyadic square meshes on the unit square and P1 vertex bookkeeping.

Every square cell ``(i, j)`` (lower-left corner at ``(i*h, j*h)``) is split
along the diagonal from its lower-left to its upper-right corner into a
*lower* triangle ``{(i, j), (i+1, j), (i+1, j+1)}`` and an *upper* triangle
``{(i, j), (i+1, j+1), (i, j+1)}``.

Only interior vertices carry degrees of freedom.  A coefficient vector of
length ``dof`` is the row-major flattening of an ``(n-1, n-1)`` array whose
entry ``[a, b]`` belongs to the vertex ``((a+1) h, (b+1) h)``.  Arrays on the
*extended* grid, boundary ring included, have shape ``(n+1, n+1)`` and entry
``[i, j]`` belongs to ``(i h, j h)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "TRIANGLES",
    "TRIANGLE_CELLS",
    "PROLONGATION_STENCIL",
    "GridLevel",
    "GridHierarchy",
    "build_hierarchy",
    "prolongation_matrix",
    "nodal_interpolate_to_coarse",
    "evaluate_fe",
]

# The six triangles around a vertex, counterclockwise starting east-northeast.
# Each entry lists the vertex offsets (in units of h), owner first.
TRIANGLES: tuple[tuple[tuple[int, int], ...], ...] = (
    ((0, 0), (1, 0), (1, 1)),
    ((0, 0), (1, 1), (0, 1)),
    ((0, 0), (0, 1), (-1, 0)),
    ((0, 0), (-1, 0), (-1, -1)),
    ((0, 0), (-1, -1), (0, -1)),
    ((0, 0), (0, -1), (1, 0)),
)


def _cell_of(tri):
    xs = [v[0] for v in tri]
    ys = [v[1] for v in tri]
    ci, cj = min(xs), min(ys)
    kind = "lower" if (ci + 1, cj) in tri else "upper"
    return ci, cj, kind


# (cell offset x, cell offset y, "lower"/"upper") for each of the six triangles.
TRIANGLE_CELLS: tuple[tuple[int, int, str], ...] = tuple(_cell_of(t) for t in TRIANGLES)

# Weight of a coarse hat function at the fine vertex offset (dx, dy) from it;
# indexed [dx + 1, dy + 1].  Diagonal edges of this triangulation run (1, 1).
PROLONGATION_STENCIL = np.array(
    [
        [0.5, 0.5, 0.0],
        [0.5, 1.0, 0.5],
        [0.0, 0.5, 0.5],
    ]
)


@dataclass(frozen=True)
class GridLevel:
    """One uniform square mesh of the hierarchy."""

    level: int
    cells_per_side: int

    @property
    def mesh_size(self) -> float:
        return 1.0 / self.cells_per_side

    @property
    def interior_vertices_per_side(self) -> int:
        return self.cells_per_side - 1

    @property
    def dof(self) -> int:
        return self.interior_vertices_per_side**2

    @property
    def shape(self) -> tuple[int, int]:
        m = self.interior_vertices_per_side
        return (m, m)

    @property
    def extended_shape(self) -> tuple[int, int]:
        n = self.cells_per_side + 1
        return (n, n)

    def as_grid(self, u: np.ndarray) -> np.ndarray:
        """2D view of a coefficient vector (or pass through an existing 2D array)."""
        u = np.asarray(u)
        if u.shape == self.shape:
            return u
        if u.size != self.dof:
            raise ValueError(f"expected {self.dof} entries on level {self.level}, got {u.size}")
        return u.reshape(self.shape)

    def coordinates(self, extended: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Vertex coordinates ``(x, y)`` as 2D arrays (``indexing='ij'``)."""
        n = self.cells_per_side
        idx = np.arange(n + 1) if extended else np.arange(1, n)
        t = idx / n
        return np.meshgrid(t, t, indexing="ij")


@dataclass(frozen=True)
class GridHierarchy:
    """Levels ``1..L`` with ``n_{l+1} = 2 n_l``; all levels share one diagonal direction."""

    coarse_cells: int
    levels: tuple[GridLevel, ...]
    triangulation_orientation: str = "lower-left-to-upper-right"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def L(self) -> int:
        return len(self.levels)

    def level(self, ell: int) -> GridLevel:
        if not 1 <= ell <= self.L:
            raise ValueError(f"level {ell} outside 1..{self.L}")
        return self.levels[ell - 1]

    def __getitem__(self, ell: int) -> GridLevel:
        return self.level(ell)

    def truncated(self, L: int) -> "GridHierarchy":
        """The sub-hierarchy of levels ``1..L``."""
        if not 1 <= L <= self.L:
            raise ValueError(f"cannot truncate a {self.L}-level hierarchy to {L} levels")
        if L == self.L:
            return self
        return GridHierarchy(self.coarse_cells, self.levels[:L])

    def prolongation(self, ell: int) -> sp.csr_matrix:
        """Cached :func:`prolongation_matrix`."""
        key = ("P", ell)
        if key not in self._cache:
            self._cache[key] = prolongation_matrix(self, ell)
        return self._cache[key]

    @cached_property
    def triangle_table(self) -> np.ndarray:
        """Vertex offsets of the six adjacent triangles, shape ``(6, 3, 2)``."""
        return np.array(TRIANGLES, dtype=np.int64)


def build_hierarchy(coarse_cells: int = 5, L: int = 1) -> GridHierarchy:
    """Build ``L`` nested meshes, the coarsest with ``coarse_cells`` cells per side.

    >>> [g.cells_per_side for g in build_hierarchy(5, 3).levels]
    [5, 10, 20]
    """
    if int(coarse_cells) != coarse_cells or coarse_cells < 2:
        raise ValueError("coarse_cells must be an integer >= 2 (a mesh needs an interior vertex)")
    if int(L) != L or L < 1:
        raise ValueError("L must be an integer >= 1")
    levels = tuple(GridLevel(ell, int(coarse_cells) * 2 ** (ell - 1)) for ell in range(1, int(L) + 1))
    return GridHierarchy(int(coarse_cells), levels)


def prolongation_matrix(hier: GridHierarchy, ell: int) -> sp.csr_matrix:
    """Matrix of the embedding ``V_ell -> V_{ell+1}`` in the hat-function bases.

    Shape ``(dof_{ell+1}, dof_ell)``.  Coarse interior vertex ``(I, J)`` sits at
    fine interior index ``(2I+1, 2J+1)`` (0-based array indices).
    """
    if not 1 <= ell <= hier.L - 1:
        raise ValueError(f"prolongation level must lie in 1..{hier.L - 1}, got {ell}")
    mc = hier.level(ell).interior_vertices_per_side
    mf = hier.level(ell + 1).interior_vertices_per_side
    ci, cj = np.meshgrid(np.arange(mc), np.arange(mc), indexing="ij")
    ci = ci.ravel()
    cj = cj.ravel()
    rows, cols, vals = [], [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            w = PROLONGATION_STENCIL[dx + 1, dy + 1]
            if w == 0.0:
                continue
            fi = 2 * ci + 1 + dx
            fj = 2 * cj + 1 + dy
            rows.append(fi * mf + fj)
            cols.append(ci * mc + cj)
            vals.append(np.full(ci.size, w))
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mf * mf, mc * mc),
    )
    return P.tocsr()


def nodal_interpolate_to_coarse(hier: GridHierarchy, ell_from: int, ell_to: int, u_fine) -> np.ndarray:
    """Sample ``u_fine`` at the vertices shared with level ``ell_to``."""
    if ell_to > ell_from:
        raise ValueError("can only interpolate to a coarser (or the same) level")
    fine = hier.level(ell_from)
    hier.level(ell_to)
    u = np.asarray(u_fine, dtype=float)
    if u.size != fine.dof:
        raise ValueError(f"expected {fine.dof} entries on level {ell_from}, got {u.size}")
    s = 2 ** (ell_from - ell_to)
    u2 = u.reshape(fine.shape)
    return np.ascontiguousarray(u2[s - 1 :: s, s - 1 :: s]).ravel()


def evaluate_fe(level: GridLevel, u, x, y) -> np.ndarray:
    """Point values of the P1 function with interior coefficients ``u``.

    ``u`` may also be given on the extended grid (boundary ring included).
    """
    n = level.cells_per_side
    u = np.asarray(u, dtype=float)
    if u.size == level.dof:
        ext = np.zeros((n + 1, n + 1))
        ext[1:n, 1:n] = u.reshape(level.shape)
    elif u.size == (n + 1) ** 2:
        ext = u.reshape(n + 1, n + 1)
    else:
        raise ValueError("coefficient vector does not match the level")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sx = x * n
    sy = y * n
    i = np.clip(np.floor(sx).astype(np.int64), 0, n - 1)
    j = np.clip(np.floor(sy).astype(np.int64), 0, n - 1)
    s = sx - i
    t = sy - j
    u00 = ext[i, j]
    u10 = ext[i + 1, j]
    u11 = ext[i + 1, j + 1]
    u01 = ext[i, j + 1]
    lower = s >= t
    # barycentric interpolation on the lower / upper triangle of the cell
    val_lower = u00 + s * (u10 - u00) + t * (u11 - u10)
    val_upper = u00 + t * (u01 - u00) + s * (u11 - u01)
    return np.where(lower, val_lower, val_upper)
