"""Tests for the ball-grid field calculus and deformation algebra."""

import io

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vel import geometry as geo
from vel.params import GasParams, derive_constants

CONSTANTS = derive_constants(GasParams(gamma=2.0, mass=1.0))
SCHEMES = ("gauss", "midpoint")

EPS = np.zeros((3, 3, 3))
EPS[0, 1, 2] = EPS[1, 2, 0] = EPS[2, 0, 1] = 1.0
EPS[0, 2, 1] = EPS[2, 1, 0] = EPS[1, 0, 2] = -1.0


def make_grid(n_r=12, n_mu=10, n_psi=12, scheme="gauss"):
    return geo.BallGrid(CONSTANTS, n_r=n_r, n_mu=n_mu, n_psi=n_psi,
                        radial_scheme=scheme)


def smooth_displacement(grid, seed, target=0.09):
    """Random smooth displacement rescaled so max |grad omega| ~= target."""
    rng = np.random.default_rng(seed)
    y = grid.y
    coef = rng.normal(size=(3, 10))
    vals = np.stack([
        coef[i, 0] + coef[i, 1] * y[0] + coef[i, 2] * y[1] + coef[i, 3] * y[2]
        + coef[i, 4] * y[0] * y[1] + coef[i, 5] * y[1] * y[2]
        + coef[i, 6] * y[0] * y[2] + coef[i, 7] * np.sin(y[0])
        + coef[i, 8] * np.cos(y[1]) + coef[i, 9] * y[2] ** 2
        for i in range(3)
    ])
    w = geo.VectorField(grid, vals)
    X = geo.gradient(w)
    fro = np.sqrt(np.einsum("ij...,ij...->...", X, X)).max()
    return geo.VectorField(grid, vals * (target / fro))


class TestBallGrid:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_weights_positive_and_sum_to_volume(self, scheme):
        grid = make_grid(scheme=scheme)
        assert np.all(grid.weights > 0.0)
        volume = 4.0 / 3.0 * np.pi * grid.r0**3
        assert abs(grid.weights.sum() - volume) <= 1e-10 * volume

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_open_grid(self, scheme):
        grid = make_grid(scheme=scheme)
        assert np.all(grid.s > 0.0)
        assert np.all(grid.s < grid.r0)
        assert np.all(grid.sigma > 0.0)

    def test_too_coarse_rejected(self):
        with pytest.raises(ValueError, match="coarse"):
            make_grid(n_r=3, scheme="gauss")
        with pytest.raises(ValueError, match="coarse"):
            make_grid(n_r=6, scheme="midpoint")
        with pytest.raises(ValueError, match="coarse"):
            make_grid(n_psi=9)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            make_grid(scheme="spectral")

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_quadrature_moments(self, scheme):
        grid = make_grid(scheme=scheme)
        r2 = np.sum(grid.y**2, axis=0)
        assert_allclose(grid.integrate(r2), 4.0 * np.pi * grid.r0**5 / 5.0,
                        rtol=1e-10)
        assert abs(grid.integrate(grid.y[0])) < 1e-12

    def test_integrate_shape_guard(self):
        grid = make_grid()
        with pytest.raises(ValueError):
            grid.integrate(np.zeros((2, 2)))


class TestFields:
    def test_shape_validation(self):
        grid = make_grid()
        with pytest.raises(ValueError):
            geo.ScalarField(grid, np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            geo.VectorField(grid, np.zeros(grid.shape))

    def test_finiteness_validation(self):
        grid = make_grid()
        bad = np.zeros(grid.shape)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            geo.ScalarField(grid, bad)

    def test_values_immutable(self):
        grid = make_grid()
        f = geo.ScalarField(grid, np.zeros(grid.shape))
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 1.0

    def test_sample(self):
        grid = make_grid()
        f = geo.ScalarField.sample(grid, lambda y: y[0] + y[1])
        assert_allclose(f.values, grid.y[0] + grid.y[1])


class TestGradient:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_constant(self, scheme):
        grid = make_grid(scheme=scheme)
        g = geo.gradient(geo.ScalarField(grid, 2.5 * np.ones(grid.shape)))
        assert np.abs(g).max() < 1e-12

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_coordinate(self, scheme):
        grid = make_grid(scheme=scheme)
        g = geo.gradient(geo.ScalarField(grid, grid.y[0]))
        assert np.abs(g[0] - 1.0).max() < 1e-12
        assert np.abs(g[1]).max() < 1e-12
        assert np.abs(g[2]).max() < 1e-12

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_radius_squared(self, scheme):
        grid = make_grid(scheme=scheme)
        g = geo.gradient(geo.ScalarField(grid, np.sum(grid.y**2, axis=0)))
        assert np.abs(g - 2.0 * grid.y).max() < 1e-10

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_mixed_polynomial(self, scheme):
        grid = make_grid(scheme=scheme)
        y1, y2, y3 = grid.y
        f = geo.ScalarField(grid, y1**2 * y3 - 2 * y2 * y3**2 + y1 * y2 * y3)
        g = geo.gradient(f)
        gx = np.array([2 * y1 * y3 + y2 * y3, -2 * y3**2 + y1 * y3,
                       y1**2 - 4 * y2 * y3 + y1 * y2])
        assert np.abs(g - gx).max() < 1e-11

    def test_vector_gradient_layout(self):
        grid = make_grid()
        y1, y2, y3 = grid.y
        F = geo.VectorField(grid, np.stack([y2, y3, y1]))
        X = geo.gradient(F)
        # X[i, j] = d_j F^i
        assert_allclose(X[0, 1], np.ones(grid.shape), atol=1e-12)
        assert_allclose(X[1, 2], np.ones(grid.shape), atol=1e-12)
        assert_allclose(X[2, 0], np.ones(grid.shape), atol=1e-12)
        assert np.abs(X[0, 0]).max() < 1e-12

    def test_smooth_spectral_accuracy(self):
        grid = make_grid(n_r=16, n_mu=16, n_psi=32)
        y1, y2, y3 = grid.y
        f = geo.ScalarField(grid, np.sin(y1) * np.cos(y2) * np.exp(0.5 * y3))
        g = geo.gradient(f)
        gx = np.array([
            np.cos(y1) * np.cos(y2) * np.exp(0.5 * y3),
            -np.sin(y1) * np.sin(y2) * np.exp(0.5 * y3),
            0.5 * np.sin(y1) * np.cos(y2) * np.exp(0.5 * y3),
        ])
        assert np.abs(g - gx).max() < 1e-8

    def test_smooth_fourth_order_radial(self):
        errs = []
        for n in (16, 32, 64):
            grid = make_grid(n_r=n, n_mu=8, n_psi=8, scheme="midpoint")
            y1, y2, y3 = grid.y
            f = y1**2 * y3 + np.cos(y3) + np.exp(y2 / 3.0)
            gx = np.array([2 * y1 * y3, np.exp(y2 / 3.0) / 3.0,
                           y1**2 - np.sin(y3)])
            dfs_exact = np.einsum("i...,i...->...", grid._yhat[:, None], gx)
            errs.append(np.abs(grid._ds(f) - dfs_exact).max())
        assert errs[0] / errs[1] > 12.0
        assert errs[1] / errs[2] > 12.0


class TestAngularDerivative:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_annihilates_radial_functions(self, scheme):
        grid = make_grid(scheme=scheme)
        r2 = geo.ScalarField(grid, np.sum(grid.y**2, axis=0))
        sig = geo.ScalarField(grid, grid.sigma)
        for i in range(3):
            assert np.abs(geo.angular_derivative(r2, i).values).max() < 1e-11
            assert np.abs(geo.angular_derivative(sig, i).values).max() < 1e-11

    def test_coordinate_case(self):
        grid = make_grid()
        f = geo.ScalarField(grid, grid.y[0])
        out = geo.angular_derivative(f, 2)
        assert_allclose(out.values, -grid.y[1], atol=1e-12)

    def test_vector_componentwise(self):
        grid = make_grid()
        F = geo.VectorField(grid, np.stack([grid.y[0], grid.sigma, grid.y[2]]))
        out = geo.angular_derivative(F, 2)
        assert_allclose(out.values[0], -grid.y[1], atol=1e-11)
        assert np.abs(out.values[1]).max() < 1e-11

    def test_direction_validated(self):
        grid = make_grid()
        f = geo.ScalarField(grid, grid.y[0])
        with pytest.raises(ValueError):
            geo.angular_derivative(f, 3)


class TestDeformation:
    def test_zero_displacement(self):
        grid = make_grid()
        st = geo.deformation(geo.VectorField(grid, np.zeros((3, *grid.shape))))
        assert_allclose(st.jacobian, np.ones(grid.shape), atol=1e-13)
        assert np.abs(st.adjugate).max() < 1e-13
        eye = geo._identity_like(st.grad_omega)
        assert np.abs(st.a_inv - eye).max() < 1e-13

    def test_uniform_dilation(self):
        grid = make_grid()
        st = geo.deformation(geo.VectorField(grid, 0.1 * grid.y))
        assert_allclose(st.jacobian, 1.331, rtol=1e-11)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_construction_self_checks(self, seed):
        grid = make_grid()
        st = geo.deformation(smooth_displacement(grid, seed))
        assert st.det_defect <= 1e-12
        assert st.expansion_defect <= 1e-12
        assert st.inverse_defect <= 1e-10

    def test_adjugate_times_map_is_det(self):
        grid = make_grid()
        st = geo.deformation(smooth_displacement(grid, 5))
        X = st.grad_omega
        eye = geo._identity_like(X)
        M = eye + X
        div = X[0, 0] + X[1, 1] + X[2, 2]
        adjM = (1.0 + div) * eye - X + st.adjugate
        prod = np.einsum("ik...,kj...->ij...", adjM, M)
        target = st.jacobian * eye
        assert np.abs(prod - target).max() <= 1e-12

    def test_regime_flag(self):
        grid = make_grid()
        w = smooth_displacement(grid, 3, target=0.09)
        assert geo.deformation(w).regime_ok
        w_big = geo.VectorField(grid, w.values * 3.0)
        assert not geo.deformation(w_big).regime_ok

    def test_degenerate_rejected(self):
        grid = make_grid()
        with pytest.raises(geo.DegenerateDeformationError):
            geo.deformation(geo.VectorField(grid, -1.1 * grid.y))

    @pytest.mark.parametrize("seed", range(6))
    def test_linear_response_constants(self, seed):
        # |J - 1| <= C |grad omega| and |A - Id| <= C |grad omega|, C <= 10
        grid = make_grid(n_r=10, n_mu=8, n_psi=10)
        st = geo.deformation(smooth_displacement(grid, seed))
        X = st.grad_omega
        fro = np.sqrt(np.einsum("ij...,ij...->...", X, X))
        live = fro > 1e-8
        dJ = np.abs(st.jacobian - 1.0)
        diffA = st.a_inv - geo._identity_like(X)
        dA = np.sqrt(np.einsum("ij...,ij...->...", diffA, diffA))
        assert (dJ[live] / fro[live]).max() <= 10.0
        assert (dA[live] / fro[live]).max() <= 10.0

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_equivalence_in_regime(self, seed):
        # 0.5 |df| <= |grad_eta f| <= 2 |df| pointwise in the regime
        grid = make_grid(n_r=10, n_mu=8, n_psi=10)
        st = geo.deformation(smooth_displacement(grid, seed))
        assert st.regime_ok
        y1, y2, y3 = grid.y
        f = geo.ScalarField(grid, np.sin(y1) + y2 * y3 - 0.4 * y3**2)
        df = geo.gradient(f)
        flow_grad = np.einsum("ki...,k...->i...", st.a_inv, df)
        flat = np.sqrt(np.einsum("i...,i...->...", df, df))
        flow = np.sqrt(np.einsum("i...,i...->...", flow_grad, flow_grad))
        live = flat > 1e-12
        ratio = flow[live] / flat[live]
        assert ratio.min() >= 0.5
        assert ratio.max() <= 2.0


class TestFlowOps:
    def test_flat_limit(self):
        grid = make_grid()
        st = geo.deformation(geo.VectorField(grid, np.zeros((3, *grid.shape))))
        y1, y2, y3 = grid.y
        F = geo.VectorField(grid, np.stack([y2 * y3, y1**2, y3]))
        G, div, curl = geo.flow_ops(st, F)
        X = geo.gradient(F)
        assert np.abs(G - X).max() < 1e-12
        assert_allclose(div, X[0, 0] + X[1, 1] + X[2, 2], atol=1e-12)
        flat_curl = np.einsum("ijk,kj...->i...", EPS, X)
        assert np.abs(curl - flat_curl).max() < 1e-12

    def test_curl_of_flow_map(self):
        grid = make_grid()
        w = smooth_displacement(grid, 11)
        st = geo.deformation(w)
        eta = geo.VectorField(grid, grid.y + w.values)
        G, _, curl = geo.flow_ops(st, eta)
        assert np.abs(curl).max() < 1e-12
        eye = geo._identity_like(G)
        assert np.abs(G - eye).max() < 1e-12

    def test_curl_of_flow_gradient(self):
        grid = make_grid(n_r=16, n_mu=16, n_psi=32)
        y1, y2, y3 = grid.y
        w = geo.VectorField(
            grid,
            0.02 * np.stack([y1 * y2 + np.sin(y3), y2**2 - y3,
                             np.cos(y1) * y2]),
        )
        st = geo.deformation(w)
        g = geo.ScalarField(grid, np.sin(y1) * y2 + 0.3 * y3**2)
        dg = geo.gradient(g)
        F = geo.VectorField(grid, np.einsum("ki...,k...->i...", st.a_inv, dg))
        _, _, curl = geo.flow_ops(st, F)
        assert np.abs(curl).max() < 1e-9


class TestPiola:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_zero_displacement(self, scheme):
        grid = make_grid(scheme=scheme)
        st = geo.deformation(geo.VectorField(grid, np.zeros((3, *grid.shape))))
        assert np.abs(geo.piola_residual(st).values).max() < 1e-10

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_quadratic_displacement_exact(self, scheme):
        grid = make_grid(scheme=scheme)
        y1, y2, y3 = grid.y
        w = geo.VectorField(grid,
                            0.05 * np.stack([y1 * y2 + y3**2, y1**2, y2 * y3]))
        st = geo.deformation(w)
        assert np.abs(geo.piola_residual(st).values).max() < 1e-10

    def test_refinement_decay(self):
        errs = []
        for n_r in (16, 32, 64):
            grid = make_grid(n_r=n_r, n_mu=16, n_psi=32, scheme="midpoint")
            y1, y2, y3 = grid.y
            w = geo.VectorField(
                grid, 0.05 * np.stack([np.sin(y1), np.sin(y2) * y3,
                                       np.cos(y3)])
            )
            errs.append(np.abs(geo.piola_residual(geo.deformation(w)).values).max())
        assert errs[0] / errs[1] > 6.0
        assert errs[1] / errs[2] > 6.0


def poly_omega(t, y):
    return 0.05 * (1.0 + 0.5 * t) * np.stack(
        [y[0] * y[1], y[2]**2 - y[0], y[1] * y[2] + y[0]]
    )


def poly_omega_t(t, y):
    return 0.025 * np.stack([y[0] * y[1], y[2]**2 - y[0], y[1] * y[2] + y[0]])


def smooth_F(t, y):
    return np.stack([np.sin(y[0]) + t * y[1], y[1] * y[2],
                     np.cos(y[2]) * (1.0 + t)])


def smooth_F_t(t, y):
    return np.stack([y[1], np.zeros_like(y[0]), np.cos(y[2])])


class TestIdentities:
    def test_exact_path_rounding_level(self):
        grid = make_grid()
        d_nabt, d_nab = geo.identity_nabt_nab(
            grid, poly_omega, poly_omega_t, smooth_F, smooth_F_t, 0.3
        )
        assert d_nabt < 1e-12
        assert d_nab < 1e-12

    def test_flat_case(self):
        grid = make_grid()

        def zero_omega(t, y):
            return np.zeros_like(y)

        d_nabt, d_nab = geo.identity_nabt_nab(
            grid, zero_omega, zero_omega, smooth_F, smooth_F_t, 0.0
        )
        assert d_nabt < 1e-12
        assert d_nab < 1e-12

    def test_flow_map_contraction_is_three(self):
        grid = make_grid()
        w = smooth_displacement(grid, 2)
        st = geo.deformation(w)
        eta = geo.VectorField(grid, grid.y + w.values)
        G, _, curl = geo.flow_ops(st, eta)
        lhs = np.einsum("ri...,ir...->...", G, G)
        rhs = np.einsum("ir...,ir...->...", G, G) - np.einsum(
            "i...,i...->...", curl, curl
        )
        assert_allclose(lhs, 3.0 * np.ones(grid.shape), atol=1e-12)
        assert_allclose(rhs, 3.0 * np.ones(grid.shape), atol=1e-12)

    def test_difference_quotient_path_consistent(self):
        grid = make_grid()
        d_nabt, _ = geo.identity_nabt_nab(
            grid, poly_omega, poly_omega_t, smooth_F, smooth_F_t, 0.3, dt=1e-4
        )
        assert d_nabt < 1e-7


class TestCommutator:
    def test_empty_angular_part(self):
        grid = make_grid()
        f = geo.ScalarField(grid, grid.y[0] * grid.y[1])
        rep = geo.commutator_defect(f, (2, 0, 0), (0, 0, 0))
        assert rep.max_commutator == 0.0
        assert rep.C_fit == 0.0
        assert rep.passed

    def test_base_case_values(self):
        grid = make_grid()
        # f = y_m, alpha = e_l, beta = e_i: commutator is the constant
        # -eps_{ilm}
        for i in range(3):
            for l in range(3):
                for m in range(3):
                    f = geo.ScalarField(grid, grid.y[m])
                    alpha = tuple(1 if a == l else 0 for a in range(3))
                    beta = tuple(1 if a == i else 0 for a in range(3))
                    rep = geo.commutator_defect(f, alpha, beta)
                    assert_allclose(rep.max_commutator, abs(EPS[i, l, m]),
                                    atol=1e-11)
                    if EPS[i, l, m] != 0.0:
                        assert rep.C_fit <= 1.0 + 1e-9

    def test_base_case_identity_pointwise(self):
        grid = make_grid()
        y1, y2, y3 = grid.y
        f = geo.ScalarField(grid, y1 * y2 - 0.5 * y3**2 + y2 * y3)
        g = geo.gradient(f)
        worst = 0.0
        for i in range(3):
            for l in range(3):
                lhs = (
                    geo.angular_derivative(geo.spatial_derivative(f, l), i).values
                    - geo.spatial_derivative(geo.angular_derivative(f, i), l).values
                )
                rhs = -sum(EPS[i, l, k] * g[k] for k in range(3))
                worst = max(worst, np.abs(lhs - rhs).max())
        assert worst < 1e-10

    def test_radial_function_closed_form(self):
        # For radial f the angular part of the mixed derivative drops out and
        # the commutator reduces to -eps_{ilk} d_k f exactly.
        grid = make_grid()
        f = geo.ScalarField(grid, grid.sigma**2)
        rep = geo.commutator_defect(f, (1, 0, 0), (0, 1, 0))
        b = CONSTANTS.b_bar
        expected = np.abs(4.0 * b * grid.sigma * grid.y[2]).max()
        assert_allclose(rep.max_commutator, expected, rtol=1e-9)
        assert np.isfinite(rep.C_fit)

    def test_higher_order_bound(self):
        grid = make_grid()
        y1, y2, y3 = grid.y
        f = geo.ScalarField(grid, y1**2 * y2 - y2 * y3**2 + y1 * y3)
        rep = geo.commutator_defect(f, (1, 0, 0), (0, 1, 1), ceiling=10.0)
        assert rep.passed
        assert rep.C_fit <= 10.0

    def test_order_cap(self):
        grid = make_grid()
        f = geo.ScalarField(grid, grid.y[0])
        with pytest.raises(ValueError, match="capped"):
            geo.commutator_defect(f, (2, 1, 0), (0, 1, 1))


class TestSerialization:
    def test_round_trip_scalar(self):
        grid = make_grid(n_r=8, n_mu=6, n_psi=8)
        f = geo.ScalarField(grid, np.sin(grid.y[0]) + grid.y[1] * grid.y[2])
        buf = io.BytesIO()
        geo.save_field(f, buf)
        buf.seek(0)
        back = geo.load_field(buf, grid)
        assert isinstance(back, geo.ScalarField)
        assert np.array_equal(back.values, f.values)

    def test_round_trip_vector(self):
        grid = make_grid(n_r=8, n_mu=6, n_psi=8)
        v = geo.VectorField(grid, np.stack([grid.y[0], grid.y[1]**2,
                                            np.cos(grid.y[2])]))
        buf = io.BytesIO()
        geo.save_field(v, buf)
        buf.seek(0)
        back = geo.load_field(buf, grid)
        assert isinstance(back, geo.VectorField)
        assert np.array_equal(back.values, v.values)

    def test_bad_magic_rejected(self):
        grid = make_grid(n_r=8, n_mu=6, n_psi=8)
        with pytest.raises(ValueError, match="magic"):
            geo.load_field(io.BytesIO(b"NOPE" + b"\x00" * 64), grid)

    def test_dims_mismatch_rejected(self):
        grid = make_grid(n_r=8, n_mu=6, n_psi=8)
        other = make_grid(n_r=10, n_mu=6, n_psi=8)
        f = geo.ScalarField(grid, np.ones(grid.shape))
        buf = io.BytesIO()
        geo.save_field(f, buf)
        buf.seek(0)
        with pytest.raises(ValueError, match="dims"):
            geo.load_field(buf, other)

    def test_truncated_rejected(self):
        grid = make_grid(n_r=8, n_mu=6, n_psi=8)
        f = geo.ScalarField(grid, np.ones(grid.shape))
        buf = io.BytesIO()
        geo.save_field(f, buf)
        raw = buf.getvalue()[:-16]
        with pytest.raises(ValueError, match="truncated"):
            geo.load_field(io.BytesIO(raw), grid)

    def test_csv_shape(self):
        grid = make_grid(n_r=6, n_mu=4, n_psi=4)
        f = geo.ScalarField(grid, np.ones(grid.shape))
        buf = io.StringIO()
        geo.field_to_csv(f, buf)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "i_r,i_mu,i_psi,v"
        assert len(lines) == 1 + grid.node_count
