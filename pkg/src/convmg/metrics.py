"""Mean relative error metrics over a set of samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fe
from .grid import GridHierarchy
from .mldata import prolongate

__all__ = ["NORMS", "MetricReport", "mr_error", "mr_error_ref", "report_rows"]

NORMS = ("H1", "L2")


@dataclass(frozen=True)
class MetricReport:
    kind: str  # MRH1, MRL2, MRH1_ref, MRL2_ref
    value: float
    N: int
    levels: tuple
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("metric values are non-negative")

    def to_json(self) -> dict:
        return {"kind": self.kind, "value": self.value, "N": self.N, "levels": list(self.levels), **self.config}


def _norm_matrix(norm: str, level):
    if norm == "H1":
        return fe.h1_mass_matrix(level)
    if norm == "L2":
        return fe.l2_mass_matrix(level)
    raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")


def _stack(fields, dof, what):
    arr = np.asarray(fields, dtype=float)
    if arr.ndim == 1:
        arr = arr[None]
    arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[1] != dof:
        raise ValueError(f"{what} have {arr.shape[1]} entries per sample, expected {dof}")
    return arr


def _quotient(pred, sol, M) -> float:
    diff = pred - sol
    num = float(np.einsum("ij,ij->", diff, (M @ diff.T).T))
    den = float(np.einsum("ij,ij->", sol, (M @ sol.T).T))
    if den <= 0:
        raise ValueError("solutions have zero norm")
    return float(np.sqrt(max(num, 0.0) / den))


def mr_error(predictions, solutions, norm: str, hier: GridHierarchy, ell: int | None = None) -> float:
    """``sqrt(sum_i |u_i - v_i|^2 / sum_i |v_i|^2)`` in the chosen norm on level ``ell`` (default finest)."""
    level = hier.level(hier.L if ell is None else ell)
    M = _norm_matrix(norm, level)
    pred = _stack(predictions, level.dof, "predictions")
    sol = _stack(solutions, level.dof, "solutions")
    if pred.shape[0] != sol.shape[0]:
        raise ValueError("need as many predictions as solutions")
    return _quotient(pred, sol, M)


def mr_error_ref(predictions, references, norm: str, hier_ref: GridHierarchy, L: int) -> float:
    """Prolongate level-``L`` predictions to the finest level of ``hier_ref`` and compare there."""
    if not 1 <= L <= hier_ref.L:
        raise ValueError(f"level {L} is not part of the reference hierarchy")
    pred = _stack(predictions, hier_ref.level(L).dof, "predictions")
    fine = np.array([prolongate(hier_ref, p, L, hier_ref.L) for p in pred])
    return mr_error(fine, references, norm, hier_ref)


def report_rows(reports) -> list[dict]:
    return [r.to_json() for r in reports]
