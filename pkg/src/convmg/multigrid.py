"""Damped-Richardson multigrid: V-cycles, iterated solves, the multilevel schedule.

Coarse operators are obtained by re-integrating the finest nodal coefficient
over the coarse triangles, which for nested P1 spaces coincides with the
Galerkin product ``P^T A P``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fe, kernels
from .grid import GridHierarchy

log = logging.getLogger(__name__)

__all__ = [
    "VCycleConfig",
    "OperatorStack",
    "SolverError",
    "build_operator_stack",
    "richardson",
    "estimate_omega",
    "v_cycle",
    "mg_solve",
    "solve_to_tolerance",
    "measure_contraction",
    "contraction_rows",
    "ml_schedule",
    "ml_solve",
    "MLSolveResult",
]

POWER_STEPS = 50
OMEGA_SAFETY = 0.9
REFERENCE_LIMIT = 200_000


class SolverError(RuntimeError):
    """Raised when an iterative solve misses its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class VCycleConfig:
    """Smoothing counts and damping of the V-cycle.

    ``k0 = 0`` selects a direct solve on the coarsest level; ``k0 > 0`` runs
    that many Richardson steps there instead.  ``omega="auto"`` estimates
    the damping on every level from the operator's largest eigenvalue.
    """

    k_pre: int = 3
    k_post: int = 3
    k0: int = 0
    omega: float | str = "auto"
    m: int = 1

    def __post_init__(self):
        if self.k_pre < 0 or self.k_post < 0 or self.k0 < 0:
            raise ValueError("smoothing counts must be non-negative")
        if self.m < 0:
            raise ValueError("number of cycles must be non-negative")
        if self.omega != "auto" and not (isinstance(self.omega, (int, float)) and self.omega > 0):
            raise ValueError("omega must be 'auto' or a positive number")

    @property
    def omega_mode(self) -> str:
        return "auto_power_iteration" if self.omega == "auto" else "fixed"

    @classmethod
    def symmetric(cls, k: int, **kw) -> "VCycleConfig":
        return cls(k_pre=k, k_post=k, **kw)

    def to_json(self) -> dict:
        return {"k_pre": self.k_pre, "k_post": self.k_post, "k0": self.k0, "omega": self.omega, "m": self.m}


@dataclass
class OperatorStack:
    """Triangle integrals and damping factors for levels ``1..L``."""

    hier: GridHierarchy
    integrals: list
    omegas: list
    coarse_matrix: np.ndarray = field(repr=False)

    @property
    def L(self) -> int:
        return len(self.integrals)

    def __getitem__(self, ell: int) -> fe.TriangleIntegrals:
        return self.integrals[ell - 1]


def estimate_omega(ti: fe.TriangleIntegrals, steps: int = POWER_STEPS, safety: float = OMEGA_SAFETY) -> float:
    """``safety / lambda_max`` with ``lambda_max`` from power iteration."""
    x = np.random.default_rng(0).standard_normal(ti.level.dof)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(steps):
        y = fe.apply_operator(ti, x)
        lam = float(x @ y)
        x = y / np.linalg.norm(y)
    return safety / lam


def _dense_from_operator(ti: fe.TriangleIntegrals) -> np.ndarray:
    n = ti.level.dof
    return np.column_stack([fe.apply_operator(ti, e) for e in np.eye(n)])


def build_operator_stack(kappa, hier: GridHierarchy, cfg: VCycleConfig | None = None) -> OperatorStack:
    """Fine triangle integrals from nodal ``kappa`` and their coarse re-integrations."""
    cfg = cfg or VCycleConfig()
    ti = fe.triangle_integrals(kappa, hier.level(hier.L))
    integrals = [ti]
    for ell in range(hier.L - 1, 0, -1):
        ti = fe.coarsen_triangle_integrals(ti, hier.level(ell))
        integrals.append(ti)
    integrals.reverse()
    if cfg.omega == "auto":
        omegas = [estimate_omega(t) for t in integrals]
    else:
        omegas = [float(cfg.omega)] * len(integrals)
    return OperatorStack(hier, integrals, omegas, _dense_from_operator(integrals[0]))


def richardson(u, f, ti: fe.TriangleIntegrals, omega: float, steps: int) -> np.ndarray:
    """``steps`` updates ``u <- u + omega (f - A u)``."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    level = ti.level
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    if u.size != level.dof or f.size != level.dof:
        raise ValueError("vector sizes do not match the level")
    if steps == 0:
        return u.copy()
    out = kernels.richardson(level.as_grid(u.ravel()), level.as_grid(f.ravel()), ti.data, fe.operator_stencil(level), float(omega), int(steps))
    return out.reshape(u.shape)


def v_cycle(u, f, stack: OperatorStack, cfg: VCycleConfig, ell: int | None = None) -> np.ndarray:
    """One V-cycle on level ``ell`` (default: finest)."""
    ell = stack.L if ell is None else ell
    if not 1 <= ell <= stack.L:
        raise ValueError(f"level {ell} outside the operator stack")
    ti, omega = stack[ell], stack.omegas[ell - 1]
    u = np.asarray(u, dtype=float).ravel()
    f = np.asarray(f, dtype=float).ravel()
    if u.size != ti.level.dof or f.size != ti.level.dof:
        raise ValueError("vector sizes do not match the level")
    if ell == 1:
        if cfg.k0 == 0:
            try:
                return np.linalg.solve(stack.coarse_matrix, f)
            except np.linalg.LinAlgError as exc:
                raise SolverError("singular coarse-level system") from exc
        return richardson(u, f, ti, omega, cfg.k0)
    P = stack.hier.prolongation(ell - 1)
    u = richardson(u, f, ti, omega, cfg.k_pre)
    r = P.T @ (f - fe.apply_operator(ti, u))
    e = v_cycle(np.zeros_like(r), r, stack, cfg, ell - 1)
    u = u + P @ e
    return richardson(u, f, ti, omega, cfg.k_post)


def _finest_rhs(f, level):
    if np.ndim(f) == 0:
        return fe.rhs_vector(level, f)
    f = np.asarray(f, dtype=float).ravel()
    if f.size != level.dof:
        raise ValueError("right-hand side does not match the finest level")
    return f


def mg_solve(u0, kappa, f, cfg: VCycleConfig, hier: GridHierarchy, stack: OperatorStack | None = None) -> np.ndarray:
    """``cfg.m`` V-cycles on the finest level starting from ``u0``.

    ``f`` is either the load vector on the finest level or a constant source.
    ``u0=None`` starts from zero.
    """
    stack = stack or build_operator_stack(kappa, hier, cfg)
    level = hier.level(stack.L)
    f = _finest_rhs(f, level)
    u = np.zeros(level.dof) if u0 is None else np.asarray(u0, dtype=float).ravel().copy()
    if u.size != level.dof:
        raise ValueError("initial guess does not match the finest level")
    for _ in range(cfg.m):
        u = v_cycle(u, f, stack, cfg)
    return u


@dataclass(frozen=True)
class SolveInfo:
    cycles: int
    relative_residual: float


def solve_to_tolerance(kappa, f, hier: GridHierarchy, cfg: VCycleConfig | None = None, rtol: float = 1e-10,
                       max_cycles: int = 200, stack: OperatorStack | None = None):
    """V-cycles until ``|f - A u| <= rtol |f|``; returns ``(u, SolveInfo)``."""
    cfg = cfg or VCycleConfig()
    stack = stack or build_operator_stack(kappa, hier, cfg)
    ti = stack[stack.L]
    f = _finest_rhs(f, ti.level)
    fn = np.linalg.norm(f)
    u = np.zeros_like(f)
    res = 1.0
    for cycle in range(1, max_cycles + 1):
        u = v_cycle(u, f, stack, cfg)
        res = np.linalg.norm(f - fe.apply_operator(ti, u)) / fn if fn > 0 else 0.0
        if res <= rtol:
            return u, SolveInfo(cycle, res)
    raise SolverError(f"no convergence after {max_cycles} cycles (relative residual {res:.3e})", residual=res)


def reference_solution(stack: OperatorStack, f) -> np.ndarray:
    """Sparse direct solve with the element-assembled finest operator."""
    ti = stack[stack.L]
    if ti.level.dof > REFERENCE_LIMIT:
        raise ValueError("finest level too large for a direct reference solve")
    A = fe.assemble_matrix(ti.level, cells=(ti.lower, ti.upper)).tocsc()
    return spla.spsolve(A, _finest_rhs(f, ti.level))


def measure_contraction(kappa, cfg: VCycleConfig, hier: GridHierarchy, f=1.0, stack=None) -> np.ndarray:
    """Energy-norm error ratios ``|e^{i+1}|_A / |e^i|_A`` for ``cfg.m`` cycles from zero."""
    stack = stack or build_operator_stack(kappa, hier, cfg)
    ti = stack[stack.L]
    rhs = _finest_rhs(f, ti.level)
    v = reference_solution(stack, rhs)
    u = np.zeros_like(rhs)
    prev = fe.energy_norm(u - v, ti)
    ratios = []
    for _ in range(cfg.m):
        u = v_cycle(u, rhs, stack, cfg)
        err = fe.energy_norm(u - v, ti)
        ratios.append(err / prev)
        prev = err
    return np.array(ratios)


def contraction_rows(kappa, cfg: VCycleConfig, hier: GridHierarchy, f=1.0):
    """CSV rows ``(level, k, cycle, ratio)``; ``k`` is the pre-smoothing count."""
    ratios = measure_contraction(kappa, cfg, hier, f)
    return [(hier.L, cfg.k_pre, i + 1, float(r)) for i, r in enumerate(ratios)]


def ml_schedule(mu: float, eps: float, L: int, c: float = 1.0) -> list[int]:
    """Cycle counts ``m_1..m_L`` for the multilevel solve.

    ``m_l >= log 2 / log(1/mu)`` for ``l < L`` and
    ``m_L >= (log(2 c^2 L / eps) - L log 2) / log(1/mu)``, each at least one.
    """
    if not 0.0 < mu < 1.0:
        raise ValueError("contraction estimate must lie in (0, 1)")
    if eps <= 0:
        raise ValueError("target accuracy must be positive")
    rate = math.log(1.0 / mu)
    m_coarse = max(1, math.ceil(math.log(2.0) / rate))
    m_fine = max(1, math.ceil((math.log(2.0 * c * c * L / eps) - L * math.log(2.0)) / rate))
    return [m_coarse] * (L - 1) + [m_fine]


@dataclass
class MLSolveResult:
    approximations: list  # tilde v_l on level l
    corrections: list  # the level-l multigrid output (tilde v_1 on level 1)
    cycles: list

    @property
    def total_cycles(self) -> int:
        return int(sum(self.cycles))

    @property
    def finest(self) -> np.ndarray:
        return self.approximations[-1]


def ml_solve(kappa, f, hier: GridHierarchy, eps_target: float, k: int, mu_estimate: float,
             cfg: VCycleConfig | None = None, c: float = 1.0, stack: OperatorStack | None = None) -> MLSolveResult:
    """Coarse-to-fine solve: a few V-cycles per level on the residual equation of
    the prolongated coarser approximation."""
    L = hier.L
    schedule = ml_schedule(mu_estimate, eps_target, L, c)
    cfg = cfg or VCycleConfig.symmetric(k)
    stack = stack or build_operator_stack(kappa, hier, cfg)
    # per-level loads: constant source assembled per level, or restrictions of the finest load
    if np.ndim(f) == 0:
        loads = [fe.rhs_vector(hier.level(ell), f) for ell in range(1, L + 1)]
    else:
        loads = [_finest_rhs(f, hier.level(L))]
        for ell in range(L - 1, 0, -1):
            loads.append(hier.prolongation(ell).T @ loads[-1])
        loads.reverse()
    approx, corrections = [], []
    for ell in range(1, L + 1):
        ti = stack[ell]
        if ell == 1:
            base = np.zeros(ti.level.dof)
            rhs = loads[0]
        else:
            base = hier.prolongation(ell - 1) @ approx[-1]
            rhs = loads[ell - 1] - fe.apply_operator(ti, base)
        c_ell = np.zeros(ti.level.dof)
        for _ in range(schedule[ell - 1]):
            c_ell = v_cycle(c_ell, rhs, stack, cfg, ell)
        corrections.append(c_ell)
        approx.append(c_ell + base)
    log.debug("ml_solve schedule %s", schedule)
    return MLSolveResult(approx, corrections, schedule)
