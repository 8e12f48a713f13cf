import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from convmg import convnet as cn
from convmg import fe
from convmg import multigrid as mg
from convmg.fields import FieldSpec, evaluate_kappa, sample_parameters
from convmg.grid import build_hierarchy


@pytest.fixture(scope="module")
def ks4():
    return cn.build_kernel_set(build_hierarchy(5, 4))


class TestConv2d:
    def test_identity_kernel(self, rng):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        x = rng.standard_normal((1, 6, 5))
        np.testing.assert_array_equal(cn.conv2d(x, cn.ConvKernel(w)), x)

    def test_ones_on_delta(self):
        x = np.zeros((1, 7, 7))
        x[0, 3, 3] = 1
        out = cn.conv2d(x, cn.ConvKernel(np.ones((1, 1, 3, 3))))[0]
        expected = np.zeros((7, 7))
        expected[2:5, 2:5] = 1
        np.testing.assert_array_equal(out, expected)

    def test_cross_correlation_orientation(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 3] = 1  # one step in +y
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 2] = 7  # reads the +y neighbour
        assert cn.conv2d(x, cn.ConvKernel(w))[0, 2, 2] == 7

    def test_valid_and_bias(self, rng):
        x = rng.standard_normal((2, 6, 6))
        k = cn.ConvKernel(rng.standard_normal((2, 3, 3, 3)), "valid", bias=np.array([1.0, 2.0, 3.0]))
        out = cn.conv2d(x, k)
        assert out.shape == (3, 4, 4)
        expect = np.einsum("cdij,cij->d", k.weights, x[:, 1:4, 2:5]) + k.bias
        np.testing.assert_allclose(out[:, 1, 2], expect)

    @pytest.mark.parametrize("w", [1, 2, 9])
    def test_strided_shapes(self, w, rng):
        k = cn.ConvKernel(rng.standard_normal((1, 1, 3, 3)), "two_strided")
        assert cn.conv2d(np.zeros((1, 2 * w + 1, 2 * w + 1)), k).shape == (1, w, w)
        kt = cn.ConvKernel(k.weights, "two_transpose_strided")
        assert cn.conv2d(np.zeros((1, w, w)), kt).shape == (1, 2 * w + 1, 2 * w + 1)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (2, 3, 3, 3), elements=st.floats(-2, 2)), st.integers(0, 2**32 - 1))
    def test_strided_pair_adjoint(self, w, seed):
        rng = np.random.default_rng(seed)
        down = cn.ConvKernel(w, "two_strided")
        up = cn.ConvKernel(np.transpose(w, (1, 0, 2, 3)), "two_transpose_strided")
        x = rng.standard_normal((2, 9, 9))
        y = rng.standard_normal((3, 4, 4))
        assert np.sum(cn.conv2d(x, down) * y) == pytest.approx(np.sum(x * cn.conv2d(y, up)), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("shape, mode", [((1, 4, 4), "two_strided"), ((2, 5, 5), "vanilla")])
    def test_shape_errors(self, shape, mode):
        with pytest.raises(ValueError):
            cn.conv2d(np.zeros(shape), cn.ConvKernel(np.ones((1, 1, 3, 3)), mode))

    def test_bad_kernel(self):
        with pytest.raises(ValueError):
            cn.ConvKernel(np.ones((3, 3)))
        with pytest.raises(ValueError):
            cn.ConvKernel(np.ones((1, 1, 3, 3)), "dilated")


class TestKernelSet:
    def test_checks_recorded(self, ks4):
        assert set(ks4.checks) == {"kappa_integration", "operator", "coarsening", "prolongation", "restriction"}
        assert max(ks4.checks.values()) <= 1e-12

    def test_operator_kernels_are_stencil(self, ks4):
        for ell in range(1, 5):
            level = ks4.hier.level(ell)
            np.testing.assert_array_equal(ks4.op[ell].weights[0], fe.operator_stencil(level))

    def test_constants_annihilated(self, ks4):
        level = ks4.hier.level(3)
        ups = np.full((6,) + level.shape, level.mesh_size**2 / 2)
        out = cn.conv_apply_operator(ks4, level, ups, np.ones(level.shape))
        np.testing.assert_allclose(out[1:-1, 1:-1], 0, atol=1e-12)

    def test_restrict_is_prolong_pattern(self, ks4):
        np.testing.assert_array_equal(ks4.restrict.weights, ks4.prolong.weights)

    def test_kappa_kernel_unit(self, ks4):
        level = ks4.hier.level(2)
        ups = cn.conv_triangle_integrals(ks4, level, np.ones(level.extended_shape))
        np.testing.assert_allclose(ups, level.mesh_size**2 / 2)

    def test_prolong_delta_is_column(self, ks4):
        hier = ks4.hier
        coarse = hier.level(2)
        P = oracles.prolongation(coarse.cells_per_side)
        for j in (0, 7, coarse.dof - 1):
            e = np.zeros(coarse.dof)
            e[j] = 1
            np.testing.assert_array_equal(cn.conv_prolong(ks4, coarse.as_grid(e)).ravel(), P[:, j])

    def test_strided_pair_gives_PPt(self, ks4, rng):
        hier = ks4.hier
        P = hier.prolongation(3)
        r = rng.standard_normal(hier.level(4).dof)
        out = cn.conv_prolong(ks4, cn.conv_restrict(ks4, hier.level(4).as_grid(r)))
        np.testing.assert_allclose(out.ravel(), P @ (P.T @ r), rtol=1e-13, atol=1e-13)

    def test_corrupted_kernel_detected(self):
        ks = cn.build_kernel_set(build_hierarchy(5, 2), verify=False)
        ks.op[1].weights[0, 2, 0, 1] += 1e-3
        with pytest.raises(cn.KernelVerificationError) as exc:
            ks.verify()
        assert exc.value.check == "operator"


class TestConvPath:
    def test_operator_matches_classical(self, ks4, rng):
        for level in ks4.hier.levels:
            kap = rng.uniform(0.1, 2, level.extended_shape)
            ti = fe.triangle_integrals(kap, level)
            u = rng.standard_normal(level.dof)
            np.testing.assert_allclose(cn.conv_apply_operator(ks4, level, ti, u), fe.apply_operator(ti, u), rtol=1e-12, atol=0)

    def test_zero_input(self, ks4, rng):
        level = ks4.hier.level(2)
        ups = rng.uniform(size=(6,) + level.shape)
        assert not np.any(cn.conv_apply_operator(ks4, level, ups, np.zeros(level.dof)))

    def test_coarsening_chain(self, ks4, rng):
        hier = ks4.hier
        kap = rng.uniform(0.1, 2, hier.level(4).extended_shape)
        stack = mg.build_operator_stack(kap, hier)
        cs = cn.build_conv_stack(kap, hier, mg.VCycleConfig(k0=10), ks4)
        for ell in range(1, 5):
            np.testing.assert_allclose(cs.integrals[ell - 1], stack[ell].data, rtol=1e-13)

    def test_mg_solve_equals_classical(self, ks4):
        hier = ks4.hier
        spec = FieldSpec.default("UniformSmooth")
        kap = evaluate_kappa(spec, sample_parameters(spec, 5, 0), hier.level(4), extended=True)
        cfg = mg.VCycleConfig(3, 3, k0=20, m=4)
        a = cn.conv_mg_solve(None, kap, 1.0, cfg, hier, ks=ks4)
        b = mg.mg_solve(None, kap, 1.0, cfg, hier)
        assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))

    def test_requires_richardson_coarse_mode(self, ks4):
        with pytest.raises(ValueError):
            cn.conv_mg_solve(None, np.ones(ks4.hier.level(4).extended_shape), 1.0, mg.VCycleConfig(k0=0), ks4.hier, ks=ks4)

    def test_zero_cycles(self, ks4, rng):
        u0 = rng.standard_normal(ks4.hier.level(4).dof)
        out = cn.conv_mg_solve(u0, np.ones(ks4.hier.level(4).extended_shape), 1.0, mg.VCycleConfig(k0=5, m=0), ks4.hier, ks=ks4)
        np.testing.assert_array_equal(out, u0)


@pytest.fixture(scope="module")
def unit():
    return cn.build_mul_unit(2.0, 1e-3)


class TestMulUnit:
    def test_structure(self, unit):
        assert unit.n_layers == 2
        assert unit.weight_count <= 9
        assert unit.layer1.size == (1, 1) and unit.layer2.size == (1, 1)
        assert (unit.layer1.c_in, unit.layer1.c_out, unit.layer2.c_out) == (2, 3, 1)

    def test_sup_error(self, unit):
        g = np.linspace(-2, 2, 401)
        X, Y = np.meshgrid(g, g, indexing="ij")
        assert np.max(np.abs(cn.mul_apply(unit, X, Y) - X * Y)) <= 1e-3

    def test_zero_factor(self, unit):
        y = np.linspace(-2, 2, 101)
        assert np.max(np.abs(cn.mul_apply(unit, np.zeros_like(y)[None], y[None]))) <= 1e-3

    def test_swish(self):
        unit = cn.build_mul_unit(1.0, 1e-3, activation="swish")
        assert unit.achieved_error <= 1e-3 and unit.weight_count <= 9

    def test_error_halves_with_epsilon(self):
        a = cn.build_mul_unit(2.0, 1e-3)
        b = cn.build_mul_unit(2.0, 5e-4)
        assert b.achieved_error <= 0.5 * a.achieved_error * 1.1
        assert b.lam < a.lam

    @pytest.mark.parametrize("B, eps", [(0, 1e-3), (1, 0.0), (1, 0.7)])
    def test_invalid(self, B, eps):
        with pytest.raises(ValueError):
            cn.build_mul_unit(B, eps)

    def test_unreachable_epsilon(self):
        with pytest.raises(ValueError, match="unreachable"):
            cn.build_mul_unit(2.0, 1e-14)

    def test_nonzero_expansion_point_exceeds_budget(self):
        with pytest.raises(ValueError, match="weights"):
            cn.build_mul_unit(1.0, 1e-3, x0=0.5)


class TestApproxOperator:
    @pytest.mark.parametrize("eps", [1e-2, 1e-3, 1e-4])
    def test_deviation_bound(self, ks4, rng, eps):
        level = ks4.hier.level(3)
        kap = rng.uniform(0.5, 1.5, level.extended_shape)
        ti = fe.triangle_integrals(kap, level)
        u = rng.uniform(-1, 1, level.dof) * 0.2
        unit = cn.build_mul_unit(2.0, eps)
        approx = cn.approx_conv_apply_operator(ks4, level, ti, u, unit)
        exact = cn.conv_apply_operator(ks4, level, ti, u)
        assert np.max(np.abs(approx - exact)) <= 6 * unit.achieved_error

    def test_zero_input(self, ks4):
        level = ks4.hier.level(2)
        unit = cn.build_mul_unit(2.0, 1e-3)
        out = cn.approx_conv_apply_operator(ks4, level, np.zeros((6,) + level.shape), np.zeros(level.dof), unit)
        assert np.max(np.abs(out)) <= 6e-3

    def test_bound_violation(self, ks4):
        level = ks4.hier.level(2)
        unit = cn.build_mul_unit(0.5, 1e-2)
        ti = fe.triangle_integrals(np.ones(level.extended_shape), level)
        with pytest.raises(ValueError, match="bound"):
            cn.approx_conv_apply_operator(ks4, level, ti, np.ones(level.dof), unit)


class TestWeightCount:
    def test_affine_in_m(self):
        for m in (1, 2, 5):
            c0, c1, c2 = (cn.count_weights(4, 3, 2, x) for x in (0, m, 2 * m))
            assert c2 - c1 == c1 - c0

    @pytest.mark.parametrize("k, k0, m", [(3, 0, 1), (2, 5, 3), (0, 4, 2)])
    def test_affine_in_L(self, k, k0, m):
        c = [cn.count_weights(L, k, k0, m) for L in range(3, 7)]
        assert np.all(np.diff(c, 2) == 0)

    def test_plumbing_only(self):
        wc = cn.WeightCount()
        assert cn.count_weights(5, 0, 0, 1) == wc.kappa_in + wc.out

    def test_mul_unit_enters_per_use(self):
        base = cn.count_weights(3, 1, 0, 1, mul_weights=0)
        assert cn.count_weights(3, 1, 0, 1, mul_weights=9) - base == 9 * 6 * (2 * 1 * 2 + 2)

    def test_quadratic_when_m_tracks_L(self):
        L = np.arange(3, 7)
        c = np.array([cn.count_weights(int(x), 3, 0, int(x)) for x in L])
        C = np.sum(c * L**2) / np.sum(L**4.0)
        assert np.all(np.abs(c / (C * L**2) - 1) <= 0.2)

    def test_multilevel_count(self):
        sched = mg.ml_schedule(0.25, 2.0**-4, 4)
        assert cn.count_weights_multilevel(sched, 3, 0) > cn.count_weights(4, 3, 0, sched[-1])
