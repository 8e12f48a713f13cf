"""Benchmark diffusion coefficients and their parameter distributions.

Four families are supported:

``UniformSmooth``
    ``1 + sum_k y_k a_k(x)`` with ``y ~ U[-1, 1]^p``.
``LogNormalSmooth``
    ``exp(sum_k y_k a_k(x))`` with ``y ~ N(0, I_p)``.
``CookieFixed``
    ``0.1 + sum_k y_k 1_{D_k}(x)``, disks of radius ``0.3/sqrt(p)`` on a
    ``sqrt(p) x sqrt(p)`` lattice.
``CookieVariable``
    ``0.1 + sum_k y_{2k-1} 1_{D_k(r(y_{2k}))}(x)`` with radii in
    ``[0.5, 0.9] / sqrt(p')``, ``p = 2 p'``.

The smooth modes are ``a_k(x) = 0.1 k^-2 cos(2 pi b1 x1) cos(2 pi b2 x2)``
with ``(b1, b2)`` running over ``N_0^2 \\ {(0, 0)}`` by increasing
``b1 + b2``, ties broken by increasing ``b2``.  This is a stand-in for the
planar Fourier family used in the literature and keeps its sup-norm decay.

Cookie inclusion conductivities are drawn from ``U[0, 1]`` so the
coefficient stays in ``[0.1, 1.1]``; radius parameters are ``U[-1, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import GridLevel

__all__ = [
    "KINDS",
    "FieldSpec",
    "ParamVector",
    "fourier_indices",
    "sample_parameters",
    "evaluate_kappa",
    "cookie_geometry",
    "parameter_rng",
]

KINDS = ("UniformSmooth", "LogNormalSmooth", "CookieFixed", "CookieVariable")

_DEFAULT_P = {"UniformSmooth": 100, "LogNormalSmooth": 100, "CookieFixed": 16, "CookieVariable": 32}


def _is_square(n: int) -> bool:
    r = math.isqrt(n)
    return r * r == n


@dataclass(frozen=True)
class FieldSpec:
    kind: str
    p: int
    decay_scale: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}; expected one of {KINDS}")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("p must be a positive integer")
        if self.kind == "CookieFixed" and not _is_square(self.p):
            raise ValueError("CookieFixed needs p to be a perfect square")
        if self.kind == "CookieVariable" and (self.p % 2 or not _is_square(self.p // 2)):
            raise ValueError("CookieVariable needs p even with p/2 a perfect square")

    @property
    def a0(self) -> float:
        return {"UniformSmooth": 1.0, "LogNormalSmooth": 0.0}.get(self.kind, 0.1)

    @property
    def distribution(self) -> str:
        return {"UniformSmooth": "uniform", "LogNormalSmooth": "normal"}.get(self.kind, "cookie")

    @property
    def lattice_side(self) -> int | None:
        if self.kind == "CookieFixed":
            return math.isqrt(self.p)
        if self.kind == "CookieVariable":
            return math.isqrt(self.p // 2)
        return None

    @classmethod
    def default(cls, kind: str) -> "FieldSpec":
        return cls(kind, _DEFAULT_P[kind])

    def to_json(self, **extra) -> dict:
        """JSON object with keys ``kind`` and ``p`` plus any run-level extras
        (``seed``, ``coarse_cells``, ``L``)."""
        return {"kind": self.kind, "p": int(self.p), **extra}

    @classmethod
    def from_json(cls, obj: dict) -> "FieldSpec":
        if "kind" not in obj:
            raise ValueError("field spec needs a 'kind'")
        kind = obj["kind"]
        return cls(kind, int(obj.get("p", _DEFAULT_P.get(kind, 1))))


@dataclass(frozen=True)
class ParamVector:
    y: np.ndarray
    distribution: str

    def __len__(self):
        return len(self.y)


def parameter_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-style generator keyed on ``(seed, index)``; independent of draw order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def sample_parameters(spec: FieldSpec, seed: int, index: int) -> ParamVector:
    rng = parameter_rng(seed, index)
    if spec.distribution == "uniform":
        y = rng.uniform(-1.0, 1.0, spec.p)
    elif spec.distribution == "normal":
        y = rng.standard_normal(spec.p)
    elif spec.kind == "CookieFixed":
        y = rng.uniform(0.0, 1.0, spec.p)
    else:
        y = rng.uniform(-1.0, 1.0, spec.p)
        y[0::2] = rng.uniform(0.0, 1.0, spec.p // 2)
    return ParamVector(y, spec.distribution)


@lru_cache(maxsize=None)
def fourier_indices(p: int) -> np.ndarray:
    """The first ``p`` frequency pairs ``(b1, b2)``, shape ``(p, 2)``."""
    out = []
    s = 1
    while len(out) < p:
        for b2 in range(s + 1):
            out.append((s - b2, b2))
            if len(out) == p:
                break
        s += 1
    return np.array(out, dtype=np.int64)


def cookie_geometry(spec: FieldSpec, y) -> tuple[np.ndarray, np.ndarray]:
    """Disk centers ``(q, 2)`` and radii ``(q,)`` for a cookie field."""
    s = spec.lattice_side
    centers1d = (np.arange(1, s + 1) - 0.5) / s
    cx, cy = np.meshgrid(centers1d, centers1d, indexing="ij")
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    if spec.kind == "CookieFixed":
        radii = np.full(s * s, 0.3 / s)
    else:
        yr = np.asarray(y)[1::2]
        radii = 0.7 / s + 0.2 / s * yr
    return centers, radii


def _kappa_at(spec: FieldSpec, y: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    if spec.kind in ("UniformSmooth", "LogNormalSmooth"):
        beta = fourier_indices(spec.p)
        amp = spec.decay_scale * np.arange(1, spec.p + 1, dtype=float) ** -2.0 * y
        # separable evaluation: sum_k amp_k cos(2 pi b1 x1) cos(2 pi b2 x2)
        c1 = np.cos(2.0 * np.pi * np.multiply.outer(x1.ravel(), beta[:, 0]))
        c2 = np.cos(2.0 * np.pi * np.multiply.outer(x2.ravel(), beta[:, 1]))
        field = np.einsum("nk,nk,k->n", c1, c2, amp).reshape(x1.shape)
        return spec.a0 + field if spec.kind == "UniformSmooth" else np.exp(field)
    centers, radii = cookie_geometry(spec, y)
    coeff = y if spec.kind == "CookieFixed" else y[0::2]
    out = np.full(x1.shape, spec.a0)
    for (c1, c2), r, w in zip(centers, radii, coeff):
        inside = (x1 - c1) ** 2 + (x2 - c2) ** 2 < r * r
        out = out + w * inside
    return out


def evaluate_kappa(spec: FieldSpec, y, level: GridLevel, extended: bool = False) -> np.ndarray:
    """Nodal values of the coefficient on ``level``.

    Returns the ``dof`` interior values, or with ``extended=True`` the
    ``(n+1)^2`` values including the boundary ring (both flattened row-major).
    """
    if isinstance(y, ParamVector):
        y = y.y
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.p,):
        raise ValueError(f"parameter vector must have length {spec.p}, got {y.shape}")
    x1, x2 = level.coordinates(extended=extended)
    return _kappa_at(spec, y, x1, x2).ravel()
