"""The multigrid building blocks as explicit convolutions.

Conventions: inputs are ``(C, H, W)`` arrays and kernels are stored as
``(C_in, C_out, kh, kw)``.  Convolutions are cross-correlations.

``vanilla``
    zero padding of ``kh // 2``; spatial size preserved.
``valid``
    no padding; output shrinks by ``kh - 1``.  Used to read the coefficient
    including its boundary ring.
``two_strided``
    maps ``2w + 1 -> w``; output ``[i, j]`` reads input ``[2i + dx, 2j + dy]``.
``two_transpose_strided``
    maps ``w -> 2w + 1``; the adjoint of ``two_strided`` for the same kernel.

With interior-vertex arrays, ``2w + 1`` fine vertices per side sit above
``w`` coarse ones, so the strided pair realises ``P^T`` and ``P`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fe
from .fe import STENCIL, TriangleIntegrals
from .grid import PROLONGATION_STENCIL, TRIANGLES, GridHierarchy, GridLevel, build_hierarchy
from .multigrid import POWER_STEPS, OMEGA_SAFETY, SolverError, VCycleConfig

__all__ = [
    "MODES",
    "ConvKernel",
    "KernelSet",
    "KernelVerificationError",
    "conv2d",
    "build_kernel_set",
    "conv_triangle_integrals",
    "conv_coarsen",
    "conv_restrict",
    "conv_prolong",
    "conv_apply_operator",
    "ConvStack",
    "build_conv_stack",
    "conv_v_cycle",
    "conv_mg_solve",
    "ACTIVATIONS",
    "MulUnit",
    "build_mul_unit",
    "mul_apply",
    "mul_unit_error",
    "approx_conv_apply_operator",
    "WeightCount",
    "count_weights",
    "count_weights_multilevel",
]

MODES = ("vanilla", "valid", "two_strided", "two_transpose_strided")


class KernelVerificationError(RuntimeError):
    def __init__(self, check: str, error: float):
        super().__init__(f"kernel check {check!r} failed (max deviation {error:.3e})")
        self.check = check
        self.error = error


@dataclass
class ConvKernel:
    weights: np.ndarray  # (C_in, C_out, kh, kw)
    mode: str = "vanilla"
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 4:
            raise ValueError("kernel weights must have shape (C_in, C_out, kh, kw)")
        if self.mode not in MODES:
            raise ValueError(f"unknown convolution mode {self.mode!r}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float)
            if self.bias.shape != (self.c_out,):
                raise ValueError("bias needs one entry per output channel")

    @property
    def c_in(self) -> int:
        return self.weights.shape[0]

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def n_parameters(self) -> int:
        return self.weights.size + (0 if self.bias is None else self.bias.size)

    def n_nonzero(self) -> int:
        nb = 0 if self.bias is None else int(np.count_nonzero(self.bias))
        return int(np.count_nonzero(self.weights)) + nb


def conv2d(x, kernel: ConvKernel) -> np.ndarray:
    """Multi-channel 2D cross-correlation; ``x`` is ``(C_in, H, W)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    W = kernel.weights
    cin, H, Wd = x.shape
    if cin != kernel.c_in:
        raise ValueError(f"kernel expects {kernel.c_in} input channels, got {cin}")
    kh, kw = kernel.size
    mode = kernel.mode
    if mode in ("vanilla", "valid"):
        if mode == "vanilla":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("vanilla mode needs odd kernel sizes")
            x = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        oh, ow = x.shape[1] - kh + 1, x.shape[2] - kw + 1
        if oh < 1 or ow < 1:
            raise ValueError("input smaller than the kernel")
        out = np.zeros((kernel.c_out, oh, ow))
        for dx in range(kh):
            for dy in range(kw):
                out += np.tensordot(W[:, :, dx, dy], x[:, dx : dx + oh, dy : dy + ow], axes=([0], [0]))
    elif mode == "two_strided":
        if H % 2 == 0 or Wd % 2 == 0 or (kh, kw) != (3, 3):
            raise ValueError("two-strided mode maps (2w+1) to w with a 3x3 kernel")
        oh, ow = (H - 1) // 2, (Wd - 1) // 2
        out = np.zeros((kernel.c_out, oh, ow))
        for dx in range(3):
            for dy in range(3):
                sl = x[:, dx : dx + 2 * oh : 2, dy : dy + 2 * ow : 2]
                out += np.tensordot(W[:, :, dx, dy], sl, axes=([0], [0]))
    else:
        if (kh, kw) != (3, 3):
            raise ValueError("two-transpose-strided mode needs a 3x3 kernel")
        out = np.zeros((kernel.c_out, 2 * H + 1, 2 * Wd + 1))
        for dx in range(3):
            for dy in range(3):
                out[:, dx : dx + 2 * H : 2, dy : dy + 2 * Wd : 2] += np.tensordot(W[:, :, dx, dy], x, axes=([0], [0]))
    if kernel.bias is not None:
        out += kernel.bias[:, None, None]
    return out


# -- kernel construction ------------------------------------------------------

def _op_kernel(level: GridLevel) -> ConvKernel:
    w = (STENCIL / level.mesh_size**2)[None]  # (1, 6, 3, 3)
    return ConvKernel(w, "vanilla")


def _kappa_kernel(level: GridLevel) -> ConvKernel:
    # valid correlation over the extended grid: owner sits at kernel centre
    w = np.zeros((1, 6, 3, 3))
    third = level.mesh_size**2 / 6.0
    for k, tri in enumerate(TRIANGLES):
        for dx, dy in tri:
            w[0, k, dx + 1, dy + 1] = third
    return ConvKernel(w, "valid")


def _coarsen_kernel() -> ConvKernel:
    """Sum of the four fine sub-triangles of each coarse triangle."""
    tri_index = {frozenset(t): (k, (0, 0)) for k, t in enumerate(TRIANGLES)}
    w = np.zeros((6, 6, 3, 3))
    for k, tri in enumerate(TRIANGLES):
        p = [np.array(v) * 2 for v in tri]  # coarse triangle in fine units
        mids = [(p[a] + p[b]) // 2 for a, b in ((0, 1), (1, 2), (2, 0))]
        subs = [
            (p[0], mids[0], mids[2]),
            (mids[0], p[1], mids[1]),
            (mids[2], mids[1], p[2]),
            (mids[0], mids[1], mids[2]),
        ]
        for sub in subs:
            # pick an owner vertex within the 3x3 neighbourhood of the coarse vertex
            for owner in sub:
                if np.all(np.abs(owner) <= 1):
                    rel = frozenset(tuple(int(c) for c in v - owner) for v in sub)
                    if rel in tri_index:
                        kf = tri_index[rel][0]
                        w[kf, k, owner[0] + 1, owner[1] + 1] += 1.0
                        break
            else:  # pragma: no cover - geometry guarantees an owner
                raise RuntimeError("sub-triangle without a neighbouring owner")
    return ConvKernel(w, "two_strided")


def _transfer_kernels() -> tuple[ConvKernel, ConvKernel]:
    w = PROLONGATION_STENCIL[None, None]
    return ConvKernel(w.copy(), "two_strided"), ConvKernel(w.copy(), "two_transpose_strided")


@dataclass
class KernelSet:
    """All constructed kernels; operator and integration kernels are per level."""

    hier: GridHierarchy
    op: dict
    kappa: dict
    coarsen: ConvKernel
    restrict: ConvKernel
    prolong: ConvKernel
    checks: dict = field(default_factory=dict)

    def verify(self, tol: float = 1e-12) -> dict:
        """Compare every kernel with its matrix oracle; raise on the first failure."""
        self.checks = verify_kernels(self, tol)
        return self.checks


def build_kernel_set(hier: GridHierarchy, verify: bool = True) -> KernelSet:
    restrict, prolong = _transfer_kernels()
    ks = KernelSet(
        hier,
        op={g.level: _op_kernel(g) for g in hier.levels},
        kappa={g.level: _kappa_kernel(g) for g in hier.levels},
        coarsen=_coarsen_kernel(),
        restrict=restrict,
        prolong=prolong,
    )
    if verify:
        ks.verify()
    return ks


def _rel(a, b) -> float:
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


def verify_kernels(ks: KernelSet, tol: float = 1e-12) -> dict:
    """Checks on a small two-level hierarchy sharing the coarse mesh of ``ks``."""
    hier2 = build_hierarchy(ks.hier.coarse_cells, 2)
    rng = np.random.default_rng(12345)
    coarse, fine = hier2.levels
    P = hier2.prolongation(1)
    checks = {}

    kappa = rng.uniform(0.5, 2.0, fine.extended_shape)
    ti = fe.triangle_integrals(kappa, fine)
    ups = conv_triangle_integrals(ks, fine, kappa, kernel=_kappa_kernel(fine))
    checks["kappa_integration"] = _rel(ups, ti.data)

    # the operator kernel of the finest level of ks, checked on a hierarchy level of its own
    top = ks.hier.level(1)
    kap_top = rng.uniform(0.5, 2.0, top.extended_shape)
    ti_top = fe.triangle_integrals(kap_top, top)
    u = rng.standard_normal(top.dof)
    A = fe.assemble_matrix(top, kap_top)
    got = conv_apply_operator(ks, top, ti_top.data, u.reshape(top.shape)).ravel()
    checks["operator"] = _rel(got, A @ u)
    for g in ks.hier.levels[1:]:
        if g.dof > 2500:
            break
        kap_g = rng.uniform(0.5, 2.0, g.extended_shape)
        ti_g = fe.triangle_integrals(kap_g, g)
        ug = rng.standard_normal(g.dof)
        got = conv_apply_operator(ks, g, ti_g.data, ug.reshape(g.shape)).ravel()
        checks["operator"] = max(checks["operator"], _rel(got, fe.assemble_matrix(g, kap_g) @ ug))

    coarse_ti = fe.coarsen_triangle_integrals(ti, coarse)
    checks["coarsening"] = _rel(conv_coarsen(ks, ti.data), coarse_ti.data)

    cols = np.eye(coarse.dof)
    Pc = np.column_stack([conv_prolong(ks, c.reshape(coarse.shape)).ravel() for c in cols])
    checks["prolongation"] = _rel(Pc, P.toarray())
    rows = np.eye(fine.dof)
    Rc = np.column_stack([conv_restrict(ks, r.reshape(fine.shape)).ravel() for r in rows])
    checks["restriction"] = _rel(Rc, P.T.toarray())

    for name, err in checks.items():
        if not err <= tol:
            raise KernelVerificationError(name, err)
    return checks


# -- convolutional path ---------------------------------------------------------

def conv_triangle_integrals(ks: KernelSet, level: GridLevel, kappa, kernel: ConvKernel | None = None) -> np.ndarray:
    """Six-channel triangle integrals from nodal ``kappa`` (boundary ring read via ``valid``)."""
    ext = fe.extend_kappa(kappa, level)
    kernel = kernel or ks.kappa[level.level]
    return conv2d(ext[None], kernel)


def conv_coarsen(ks: KernelSet, ups) -> np.ndarray:
    return conv2d(ups, ks.coarsen)


def conv_restrict(ks: KernelSet, r) -> np.ndarray:
    return conv2d(np.asarray(r)[None], ks.restrict)[0]


def conv_prolong(ks: KernelSet, e) -> np.ndarray:
    return conv2d(np.asarray(e)[None], ks.prolong)[0]


def conv_apply_operator(ks: KernelSet, level: GridLevel, ups, u) -> np.ndarray:
    """``sum_k ups[k] * (u star K_k)`` through :func:`conv2d`; ``u`` is 2D or flat."""
    u = np.asarray(u, dtype=float)
    u2 = level.as_grid(u)
    ups = ups.data if isinstance(ups, TriangleIntegrals) else np.asarray(ups)
    if ups.shape != (6,) + level.shape:
        raise ValueError("triangle integrals do not match the level")
    stencil_out = conv2d(u2[None], ks.op[level.level])
    out = (ups * stencil_out).sum(axis=0)
    return out if u.ndim == 2 else out.ravel()


@dataclass
class ConvStack:
    ks: KernelSet
    integrals: list  # (6, m, m) arrays, level 1 first
    omegas: list

    @property
    def L(self) -> int:
        return len(self.integrals)


def _conv_omega(ks, level, ups) -> float:
    x = np.random.default_rng(0).standard_normal(level.dof).reshape(level.shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(POWER_STEPS):
        y = conv_apply_operator(ks, level, ups, x)
        lam = float(np.sum(x * y))
        x = y / np.linalg.norm(y)
    return OMEGA_SAFETY / lam


def build_conv_stack(kappa, hier: GridHierarchy, cfg: VCycleConfig, ks: KernelSet | None = None) -> ConvStack:
    ks = ks or build_kernel_set(hier)
    ups = conv_triangle_integrals(ks, hier.level(hier.L), kappa)
    integrals = [ups]
    for _ in range(hier.L - 1):
        ups = conv_coarsen(ks, ups)
        integrals.append(ups)
    integrals.reverse()
    if cfg.omega == "auto":
        omegas = [_conv_omega(ks, hier.level(i + 1), u) for i, u in enumerate(integrals)]
    else:
        omegas = [float(cfg.omega)] * len(integrals)
    return ConvStack(ks, integrals, omegas)


def _conv_smooth(cs: ConvStack, ell, u, f, steps):
    level = cs.ks.hier.level(ell)
    ups, omega = cs.integrals[ell - 1], cs.omegas[ell - 1]
    for _ in range(steps):
        u = u + omega * (f - conv_apply_operator(cs.ks, level, ups, u))
    return u


def conv_v_cycle(u, f, cs: ConvStack, cfg: VCycleConfig, ell: int | None = None) -> np.ndarray:
    """One V-cycle on 2D arrays, every matrix action a convolution."""
    ell = cs.L if ell is None else ell
    if cfg.k0 < 1:
        raise ValueError("the convolutional V-cycle needs k0 >= 1 coarse Richardson steps")
    if ell == 1:
        return _conv_smooth(cs, 1, u, f, cfg.k0)
    level = cs.ks.hier.level(ell)
    u = _conv_smooth(cs, ell, u, f, cfg.k_pre)
    r = conv_restrict(cs.ks, f - conv_apply_operator(cs.ks, level, cs.integrals[ell - 1], u))
    e = conv_v_cycle(np.zeros_like(r), r, cs, cfg, ell - 1)
    u = u + conv_prolong(cs.ks, e)
    return _conv_smooth(cs, ell, u, f, cfg.k_post)


def conv_mg_solve(u0, kappa, f, cfg: VCycleConfig, hier: GridHierarchy, ks: KernelSet | None = None,
                  stack: ConvStack | None = None) -> np.ndarray:
    """Convolutional counterpart of :func:`convmg.multigrid.mg_solve` (flat in, flat out)."""
    if cfg.k0 < 1:
        raise ValueError("the convolutional path has no direct solver; use k0 >= 1")
    cs = stack or build_conv_stack(kappa, hier, cfg, ks)
    level = hier.level(hier.L)
    f = fe.rhs_vector(level, f) if np.ndim(f) == 0 else np.asarray(f, dtype=float)
    f2 = level.as_grid(f.ravel())
    u = np.zeros(level.shape) if u0 is None else level.as_grid(np.asarray(u0, dtype=float).ravel()).copy()
    for _ in range(cfg.m):
        u = conv_v_cycle(u, f2, cs, cfg)
    if not np.all(np.isfinite(u)):
        raise SolverError("convolutional multigrid diverged")
    return u.ravel()


# -- approximate multiplication -------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_dd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 - s)


def _swish(x):
    return x / (1.0 + np.exp(-x))


def _swish_dd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


# name -> (activation, second derivative)
ACTIVATIONS = {"softplus": (_softplus, _softplus_dd), "swish": (_swish, _swish_dd)}


@dataclass
class MulUnit:
    """Two-layer network of 1x1 convolutions approximating ``x * y``.

    Layer one maps ``(x, y)`` to ``x0 + lam * (x, y, x + y)``; after the
    activation, layer two forms the second mixed difference
    ``(r(x0+lam(x+y)) - r(x0+lam x) - r(x0+lam y) + r(x0)) / (lam^2 r''(x0))``.
    Parameters that are structurally zero are not counted.
    """

    activation: str
    x0: float
    lam: float
    B: float
    epsilon_target: float
    achieved_error: float
    layer1: ConvKernel
    layer2: ConvKernel

    n_layers: int = 2

    @property
    def weight_count(self) -> int:
        return self.layer1.n_nonzero() + self.layer2.n_nonzero()


def _mul_layers(activation, x0, lam):
    rho, rho_dd = ACTIVATIONS[activation]
    scale = 1.0 / (lam * lam * rho_dd(x0))
    w1 = np.zeros((2, 3, 1, 1))
    w1[0, 0] = w1[1, 1] = w1[0, 2] = w1[1, 2] = lam
    b1 = np.full(3, x0) if x0 != 0.0 else None
    w2 = np.array([-scale, -scale, scale]).reshape(3, 1, 1, 1)
    c = float(rho(np.float64(x0))) * scale
    b2 = np.array([c]) if c != 0.0 else None
    return ConvKernel(w1, "vanilla", b1), ConvKernel(w2, "vanilla", b2)


def _mul_forward(layer1, layer2, activation, x, y):
    rho = ACTIVATIONS[activation][0]
    inp = np.stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)])
    return conv2d(rho(conv2d(inp, layer1)), layer2)[0]


def mul_unit_error(activation, x0, lam, B, points=401) -> float:
    g = np.linspace(-B, B, points)
    X, Y = np.meshgrid(g, g, indexing="ij")
    l1, l2 = _mul_layers(activation, x0, lam)
    return float(np.max(np.abs(_mul_forward(l1, l2, activation, X, Y) - X * Y)))


def build_mul_unit(B: float, epsilon: float, activation: str = "softplus", x0: float = 0.0,
                   points: int = 401) -> MulUnit:
    """Largest ``lam`` (by bisection) whose sup error on the ``points x points``
    grid of ``[-B, B]^2`` is at most ``epsilon``."""
    if B <= 0:
        raise ValueError("input bound B must be positive")
    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 1/2)")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if ACTIVATIONS[activation][1](np.float64(x0)) == 0.0:
        raise ValueError("the activation needs a non-zero second derivative at x0")

    def err(lam):
        return mul_unit_error(activation, x0, lam, B, points)

    lo = 1.0 / B
    best = (err(lo), lo)
    while best[0] > epsilon:
        lo /= 2.0
        e = err(lo)
        if e >= best[0] or lo < 1e-8:
            raise ValueError(f"epsilon={epsilon:g} unreachable in floating point; best error {min(e, best[0]):.3e}")
        best = (e, lo)
    hi = lo * 2.0
    while err(hi) <= epsilon and hi < 1e3:
        lo, hi = hi, hi * 2.0
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if err(mid) <= epsilon:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-10:
            break
    l1, l2 = _mul_layers(activation, x0, lo)
    unit = MulUnit(activation, float(x0), lo, float(B), float(epsilon), err(lo), l1, l2)
    if unit.weight_count > 9:
        raise ValueError(f"construction at x0={x0} needs {unit.weight_count} weights (> 9)")
    return unit


def mul_apply(unit: MulUnit, x, y) -> np.ndarray:
    return _mul_forward(unit.layer1, unit.layer2, unit.activation, x, y)


def approx_conv_apply_operator(ks: KernelSet, level: GridLevel, ups, u, unit: MulUnit) -> np.ndarray:
    """Operator application with each pointwise product replaced by ``unit``.

    Operands are rescaled by the triangle area (a factor absorbed into the
    kernels), so the unit sees mean coefficients and unit-mesh stencil values.
    Deviation from the exact path is at most ``6 * unit.achieved_error``.
    """
    u = np.asarray(u, dtype=float)
    u2 = level.as_grid(u)
    ups = ups.data if isinstance(ups, TriangleIntegrals) else np.asarray(ups)
    area = level.mesh_size**2 / 2.0
    a = ups / area
    b = conv2d(u2[None], ks.op[level.level]) * area
    bound = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if bound > unit.B:
        raise ValueError(f"operands reach {bound:.3g}, beyond the unit's bound B={unit.B}")
    out = sum(mul_apply(unit, a[k], b[k]) for k in range(6))
    return out if u.ndim == 2 else out.ravel()


# -- weight counting ----------------------------------------------------------------

@dataclass(frozen=True)
class WeightCount:
    """Parameters of the convolutional multigrid network, by building block."""

    mul_weights: int = 8
    kappa_in: int = 1 * 6 * 3 * 3
    operator: int = 1 * 6 * 3 * 3
    channel_sum: int = 6
    smooth_update: int = 3  # u + omega f - omega A u
    residual_update: int = 2  # f - A u
    coarsen: int = 6 * 6 * 3 * 3
    restrict: int = 9
    prolong: int = 9
    add_correction: int = 2
    out: int = 1

    @property
    def smoothing_step(self) -> int:
        return self.operator + 6 * self.mul_weights + self.channel_sum + self.smooth_update

    @property
    def residual(self) -> int:
        return self.operator + 6 * self.mul_weights + self.channel_sum + self.residual_update

    @property
    def level_transfer(self) -> int:
        return self.residual + self.coarsen + self.restrict + self.prolong + self.add_correction

    def v_cycle(self, ell: int, k: int, k0: int) -> int:
        """Weights of one V-cycle on level ``ell``; branches that provably return zero are pruned."""
        total = k0 * self.smoothing_step
        live = k0 > 0
        for _ in range(2, ell + 1):
            live = live or k > 0
            if live:
                total += 2 * k * self.smoothing_step + self.level_transfer
        return total


def count_weights(L: int, k: int, k0: int, m: int, mul_weights: int | None = None) -> int:
    """Weights of the network computing ``m`` V-cycles on ``L`` levels."""
    wc = WeightCount() if mul_weights is None else WeightCount(mul_weights=mul_weights)
    return wc.kappa_in + m * wc.v_cycle(L, k, k0) + wc.out


def count_weights_multilevel(schedule, k: int, k0: int, mul_weights: int | None = None) -> int:
    """Weights of the coarse-to-fine network with ``schedule[l-1]`` cycles on level ``l``."""
    wc = WeightCount() if mul_weights is None else WeightCount(mul_weights=mul_weights)
    L = len(schedule)
    total = wc.kappa_in + (L - 1) * wc.coarsen + wc.out
    for ell, m_ell in enumerate(schedule, start=1):
        total += m_ell * wc.v_cycle(ell, k, k0)
        if ell > 1:
            total += wc.prolong + wc.residual + wc.add_correction
    return total
