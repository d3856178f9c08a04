"""Map representation, lift equivariance, inversion, and hyperbolicity certificates."""

import math

import numpy as np
import pytest

from anosovlab.errors import (
    CertificationFailed,
    DegenerateDerivative,
    NonConvergence,
)
from anosovlab.torus_map import (
    IntMatrix2,
    MapClass,
    TrigTerm,
    certify_hyperbolicity,
    classify_linear,
    make_linear,
    make_raw,
    make_shear_composition,
    make_smooth_conjugate,
)

from families import L_CANON, LAM_S, LAM_U, shear_map, smooth_conjugate_map

RNG = np.random.default_rng(20260823)


def canonical_maps():
    return shear_map(), smooth_conjugate_map()


class TestClassify:
    def test_canonical_is_noninvertible_anosov(self):
        assert classify_linear(L_CANON) is MapClass.NON_INVERTIBLE_ANOSOV

    def test_cat_map_is_invertible_anosov(self):
        assert classify_linear(IntMatrix2(((2, 1), (1, 1)))) is MapClass.INVERTIBLE_ANOSOV

    def test_doubling_is_expanding(self):
        assert classify_linear(IntMatrix2(((2, 0), (0, 2)))) is MapClass.EXPANDING

    def test_unipotent_is_not_hyperbolic(self):
        assert classify_linear(IntMatrix2(((1, 1), (0, 1)))) is MapClass.NOT_HYPERBOLIC

    def test_complex_pair_classified_by_modulus(self):
        # rotation-like matrix, det 1, complex spectrum on the unit circle
        assert classify_linear(IntMatrix2(((0, -1), (1, 0)))) is MapClass.NOT_HYPERBOLIC
        # complex spectrum with modulus sqrt(2) > 1
        assert classify_linear(IntMatrix2(((1, -1), (1, 1)))) is MapClass.EXPANDING

    def test_eigen_data_closed_form(self):
        lam_u, lam_s, basis, basis_inv = L_CANON.eigen_data()
        assert lam_u == pytest.approx(LAM_U, abs=1e-14)
        assert lam_s == pytest.approx(LAM_S, abs=1e-14)
        for lam, col in ((lam_u, 0), (lam_s, 1)):
            v = basis[:, col]
            assert np.allclose(L_CANON.array @ v, lam * v, atol=1e-12)
        assert np.allclose(basis_inv @ basis, np.eye(2), atol=1e-13)


class TestEvalLift:
    def test_linear_map_is_matrix_action(self):
        f = make_linear(L_CANON)
        x = RNG.uniform(-3, 3, size=(40, 2))
        assert np.allclose(f.eval_lift(x), x @ L_CANON.array.T, atol=0.0)

    def test_origin_fixed_for_zero_phase(self):
        for f in canonical_maps():
            assert np.allclose(f.eval_lift(np.zeros(2)), 0.0, atol=1e-14)

    def test_equivariance_all_constructors(self):
        x = RNG.uniform(-2, 2, size=(30, 2))
        raw = make_raw(L_CANON, [TrigTerm((1, 0), (0.05, 0.02), 0.3)])
        for f in (raw, *canonical_maps()):
            for m in [(1, 0), (0, 1), (-2, 1), (2, -2)]:
                mv = np.array(m, dtype=float)
                res = f.eval_lift(x + mv) - f.eval_lift(x) - L_CANON.array @ mv
                assert np.max(np.abs(res)) < 1e-12


class TestDerivative:
    def test_linear_derivative_constant(self):
        f = make_linear(L_CANON)
        d = f.derivative(RNG.uniform(size=(7, 2)))
        assert np.allclose(d, L_CANON.array, atol=0.0)
        assert np.allclose(f.jacobian(RNG.uniform(size=(5, 2))), 2.0, atol=0.0)

    def test_shear_composition_has_constant_jacobian(self):
        shear, _ = canonical_maps()
        assert shear.constant_jacobian == pytest.approx(2.0, abs=0.0)
        jac = shear.jacobian(RNG.uniform(-1, 1, size=(100, 2)))
        assert np.max(np.abs(jac - 2.0)) < 1e-12

    def test_finite_difference_matches_derivative(self):
        for f in canonical_maps():
            x = RNG.uniform(-1, 1, size=(20, 2))
            d = f.derivative(x)
            h = 1e-6
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd = (f.eval_lift(x + e) - f.eval_lift(x - e)) / (2 * h)
                assert np.max(np.abs(fd - d[..., :, j])) < 1e-7

    def test_chain_rule_along_orbit(self):
        shear, _ = canonical_maps()
        x = RNG.uniform(size=2)
        n = 20
        prod = np.eye(2)
        z = x.copy()
        for _ in range(n):
            prod = shear.derivative(z) @ prod
            z = shear.step_reduced(z)
        # derivative of the n-fold reduced composition (reduction is a local isometry)
        y = x.copy()
        mat = np.eye(2)
        for _ in range(n):
            mat = shear.derivative(y) @ mat
            y = shear.step_reduced(y)
        assert np.allclose(prod, mat, rtol=1e-10)

    def test_degenerate_derivative_raised(self):
        # Df = [[3, 1 + c cos(2 pi x2)], [2, 0]] with c = 1.8 pi: det vanishes
        # on the curve cos(2 pi x2) = -1/c
        f = make_raw(L_CANON, [TrigTerm((0, 1), (0.9, 0.0), 0.0)])
        x2 = math.acos(-1.0 / (1.8 * math.pi)) / (2.0 * math.pi)
        with pytest.raises(DegenerateDerivative):
            f.jacobian(np.array([[0.3, x2], [0.1, 0.2]]))


class TestInvertLift:
    def test_linear_inverse_exact(self):
        f = make_linear(L_CANON)
        y = RNG.uniform(-2, 2, size=(10, 2))
        x = f.invert_lift(y)
        assert np.max(np.abs(f.eval_lift(x) - y)) < 1e-12

    def test_round_trip_all_constructors(self):
        x = RNG.uniform(-2, 2, size=(50, 2))
        raw = make_raw(L_CANON, [TrigTerm((1, 1), (0.04, -0.03), 0.7)])
        for f in (raw, *canonical_maps()):
            back = f.invert_lift(f.eval_lift(x))
            assert np.max(np.linalg.norm(back - x, axis=-1)) < 1e-10

    def test_nonconvergence_on_starved_iteration(self):
        shear, _ = canonical_maps()
        with pytest.raises(NonConvergence):
            shear.invert_lift(np.array([57.3, -41.9]), guess=np.zeros(2), max_iter=2)


class TestBounds:
    def test_perturbation_sup_bound_holds(self):
        for f in canonical_maps():
            bound = f.perturbation_sup_bound()
            x = RNG.uniform(-1, 1, size=(4000, 2))
            dev = np.linalg.norm(f.eval_lift(x) - x @ L_CANON.array.T, axis=-1)
            assert np.max(dev) <= bound + 1e-12
            assert bound < 1.0

    def test_deriv_lip_bound_holds_on_samples(self):
        for f in canonical_maps():
            lip = f.deriv_lip_bound()
            x = RNG.uniform(-1, 1, size=(500, 2))
            y = x + RNG.uniform(-1e-3, 1e-3, size=x.shape)
            num = np.linalg.norm((f.derivative(x) - f.derivative(y)).reshape(-1, 4), axis=-1)
            den = np.linalg.norm(x - y, axis=-1)
            assert np.max(num / den) <= lip * (1 + 1e-8)


class TestCertificate:
    def test_linear_certificate_hits_eigenvalues(self):
        f = make_linear(L_CANON)
        cert = certify_hyperbolicity(f, grid_n=64, theta_u=0.1, theta_s=0.1)
        assert cert.mu_u >= 3.5
        assert cert.mu_s <= 0.6
        assert cert.mu_u == pytest.approx(LAM_U, rel=1e-12)
        assert cert.mu_s == pytest.approx(-LAM_S, rel=1e-12)

    def test_raw_small_amplitude_certifies(self):
        f = make_raw(L_CANON, [TrigTerm((1, 0), (0.05, 0.02), 0.3)])
        cert = certify_hyperbolicity(f, grid_n=512)
        assert cert.mu_u > 1.0 and cert.mu_s < 1.0

    def test_perturbed_maps_certify_with_smaller_margin(self):
        f0_mu = certify_hyperbolicity(make_linear(L_CANON), grid_n=64).mu_u
        for f in canonical_maps():
            cert = certify_hyperbolicity(f, grid_n=512)
            assert cert.mu_u > 1.0 and cert.mu_s < 1.0
            assert cert.mu_u < f0_mu

    def test_large_amplitude_fails_certification(self):
        f = make_raw(L_CANON, [TrigTerm((1, 0), (0.0, 1.0), 0.0)])
        with pytest.raises(CertificationFailed) as exc:
            certify_hyperbolicity(f, grid_n=64)
        assert exc.value.cell is not None
        assert exc.value.margin < 0

    def test_cone_growth_on_sampled_vectors(self):
        shear, _ = canonical_maps()
        cert = certify_hyperbolicity(shear, grid_n=512)
        _, _, basis, basis_inv = shear.eigen_data()
        gu = math.tan(cert.theta_u)
        x = RNG.uniform(size=(200, 2))
        # random unit vectors inside the unstable cone, in eigen-coordinates
        b = RNG.uniform(-gu, gu, size=200)
        vec = (basis @ np.stack([np.ones(200), b], axis=0)).T
        for n in range(1, 6):
            d = shear.derivative(x)
            new = (d @ vec[..., None])[..., 0]
            c_old = (basis_inv @ vec[..., None])[..., 0]
            c_new = (basis_inv @ new[..., None])[..., 0]
            growth = np.abs(c_new[:, 0]) / np.abs(c_old[:, 0])
            assert np.min(growth) >= cert.mu_u - 1e-9
            vec = new
            x = shear.step_reduced(x)


class TestScaledFamily:
    def test_eps_zero_is_linear(self):
        for f in canonical_maps():
            f0 = f.scaled(0.0)
            x = RNG.uniform(-1, 1, size=(20, 2))
            assert np.max(np.abs(f0.eval_lift(x) - x @ L_CANON.array.T)) < 1e-12

    def test_eps_one_is_identity_of_family(self):
        for f in canonical_maps():
            f1 = f.scaled(1.0)
            x = RNG.uniform(-1, 1, size=(20, 2))
            assert np.allclose(f1.eval_lift(x), f.eval_lift(x), atol=1e-12)


class TestSmoothConjugate:
    def test_conjugation_identity(self):
        _, smooth = canonical_maps()
        x = RNG.uniform(-1, 1, size=(50, 2))
        lhs = smooth.eval_ground_truth_h(smooth.eval_lift(x))
        rhs = (L_CANON.array @ smooth.eval_ground_truth_h(x)[..., None])[..., 0]
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_area_preserving_variant_has_constant_jacobian(self):
        f = make_smooth_conjugate(
            L_CANON, h_shears=([(1, 0.03, 0.0)], [(1, 0.03, 0.5)])
        )
        assert f.constant_jacobian == pytest.approx(2.0, abs=0.0)
        jac = f.jacobian(RNG.uniform(size=(200, 2)))
        assert np.max(np.abs(jac - 2.0)) < 1e-11
