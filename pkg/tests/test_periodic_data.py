"""Periodic orbits, exponents, specialness scan, and Birkhoff averages."""

import math

import numpy as np
import pytest

from anosovlab.errors import ComplexEigenvalues, NonConvergence, PeriodCollapse
from anosovlab.periodic_data import (
    PeriodicOrbit,
    birkhoff_exponent,
    continue_periodic_orbit,
    livshitz_obstruction,
    orbit_exponents,
    orbit_log_jacobian_mean,
    periodic_orbits_linear,
    periodic_points_linear,
    specialness_diagnostic,
)
from anosovlab.conjugacy import build_conjugacy
from anosovlab.torus_map import TrigTerm, make_raw

from families import L_CANON, LAM_S, LAM_U, certified

LOG_LAM_U = math.log(LAM_U)
LOG_LAM_S = math.log(abs(LAM_S))


class TestLinearEnumeration:
    def test_counts_match_determinant(self):
        # |det(L^n - I)| fixed points of L^n
        assert len(periodic_points_linear(L_CANON, 1)) == 4
        assert len(periodic_points_linear(L_CANON, 2)) == 8
        assert len(periodic_points_linear(L_CANON, 3)) == 52

    def test_points_are_exactly_periodic(self):
        e = L_CANON.entries
        for n in (1, 2, 3):
            for pt in periodic_points_linear(L_CANON, n):
                x = pt
                for _ in range(n):
                    x = ((e[0][0] * x[0] + e[0][1] * x[1]) % 1,
                         (e[1][0] * x[0] + e[1][1] * x[1]) % 1)
                assert x == pt

    def test_orbit_grouping_drops_lower_periods(self):
        # 8 fixed points of L^2 minus the 4 fixed points of L: two 2-orbits
        orbits = periodic_orbits_linear(L_CANON, 2)
        assert len(orbits) == 2
        assert all(len(o) == 2 and o[0] != o[1] for o in orbits)


class TestContinuation:
    def test_linear_continuation_is_identity(self):
        f, _ = certified("linear")
        seed = periodic_orbits_linear(L_CANON, 3)[0]
        orbit = continue_periodic_orbit(f, seed)
        ref = np.array([[float(a), float(b)] for a, b in seed])
        assert np.max(np.abs(orbit.points - ref)) < 1e-14
        assert orbit.check_closure(f)

    def test_smooth_orbits_are_preimages_of_linear_seeds(self):
        # F = h^{-1} A h, so h maps continued orbits back onto the seeds
        f, _ = certified("smooth")
        for seed in periodic_orbits_linear(L_CANON, 3)[:4]:
            orbit = continue_periodic_orbit(f, seed)
            hpts = f.eval_ground_truth_h(orbit.points)
            ref = np.array([[float(a), float(b)] for a, b in seed])
            dev = np.abs(hpts - np.round(hpts - ref) - ref)
            assert np.max(dev) < 1e-12

    def test_residuals_and_closure(self):
        for name in ("shear", "smooth_shear"):
            f, _ = certified(name)
            for n in (1, 2, 4):
                seed = periodic_orbits_linear(L_CANON, n)[0]
                orbit = continue_periodic_orbit(f, seed)
                assert orbit.residual < 1e-11
                assert orbit.check_closure(f)
                assert np.all(orbit.points >= 0.0) and np.all(orbit.points < 1.0)

    def test_collapsed_seed_raises(self):
        f, _ = certified("smooth")
        with pytest.raises(PeriodCollapse):
            continue_periodic_orbit(f, [(0, 0), (0, 0)])

    def test_nonconvergence_reports_amplitude(self):
        f = make_raw(L_CANON, [TrigTerm((1, 0), (2.0, 0.0), 0.3),
                               TrigTerm((0, 1), (0.0, 2.0), 0.1)])
        seed = periodic_orbits_linear(L_CANON, 2)[0]
        with pytest.raises(NonConvergence, match="eps="):
            continue_periodic_orbit(f, seed, homotopy_steps=3)


class TestExponents:
    def test_linear_orbit_exponents(self):
        f, _ = certified("linear")
        for n in (1, 2, 3):
            seed = periodic_orbits_linear(L_CANON, n)[0]
            e = orbit_exponents(continue_periodic_orbit(f, seed))
            assert abs(e.lam_u - LOG_LAM_U) < 1e-12
            assert abs(e.lam_s - LOG_LAM_S) < 1e-12

    def test_sum_identity_equals_mean_log_jacobian(self):
        f, _ = certified("shear")
        for n in (1, 3, 4):
            seed = periodic_orbits_linear(L_CANON, n)[0]
            orbit = continue_periodic_orbit(f, seed)
            e = orbit_exponents(orbit)
            assert abs(e.total - orbit_log_jacobian_mean(f, orbit)) < 1e-10

    def test_complex_cocycle_rejected(self):
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        orbit = PeriodicOrbit(period=1, points=np.zeros((1, 2)),
                              words=np.zeros((1, 2), dtype=int),
                              cocycle=rot, residual=0.0)
        with pytest.raises(ComplexEigenvalues):
            orbit_exponents(orbit)


class TestSpecialnessDiagnostic:
    def test_linear_spread_vanishes(self):
        f, _ = certified("linear")
        rep = specialness_diagnostic(f, 3)
        assert rep.spread < 1e-12
        assert rep.verdict == "consistent with special"
        assert len(rep.orbits) == 4 + 2 + 16
        assert not rep.failures

    def test_smooth_conjugate_is_special(self):
        f, _ = certified("smooth")
        rep = specialness_diagnostic(f, 4)
        assert rep.spread < 1e-10
        assert rep.verdict == "consistent with special"

    def test_shear_is_non_special(self):
        f, _ = certified("shear")
        rep = specialness_diagnostic(f, 4)
        assert rep.spread > 1e-9 * 100
        assert rep.spread > 0.1
        assert rep.verdict == "non-special at scanned periods"


class TestLivshitzObstruction:
    def test_vanishes_against_itself(self):
        f, _ = certified("shear")
        assert livshitz_obstruction(f, f, lambda x: x, 3) == 0.0

    def test_smooth_conjugate_matches_linearization(self):
        f, _ = certified("smooth")
        g, _ = certified("linear")
        H = build_conjugacy(f, tol=1e-9)
        assert livshitz_obstruction(f, g, H.eval, 4) < 1e-6

    def test_shear_obstruction_is_large(self):
        f, _ = certified("shear")
        g, _ = certified("linear")
        H = build_conjugacy(f, tol=1e-9)
        ob = livshitz_obstruction(f, g, H.eval, 4)
        assert ob > 100 * 1e-6
        assert ob > 0.1

    def test_stable_flavor(self):
        f, _ = certified("smooth")
        g, _ = certified("linear")
        H = build_conjugacy(f, tol=1e-9)
        assert livshitz_obstruction(f, g, H.eval, 3, flavor="stable") < 1e-6


class TestBirkhoff:
    def test_linear_unstable_exponent(self):
        f, _ = certified("linear")
        est = birkhoff_exponent(f, [0.123, 0.456], 100_000)
        assert abs(est.value - LOG_LAM_U) < 1e-6

    def test_linear_stable_exponent(self):
        f, _ = certified("linear")
        est = birkhoff_exponent(f, [0.123, 0.456], 100_000, flavor="stable")
        assert abs(est.value - LOG_LAM_S) < 1e-6

    def test_shear_estimate_within_certified_window(self):
        f, cert = certified("shear")
        est = birkhoff_exponent(f, [0.3, 0.7], 50_000)
        assert math.log(cert.mu_u) - 1e-9 <= est.value <= LOG_LAM_U + 0.2
        assert est.stderr < 1e-2
        # sum identity in time average: lam_u + lam_s = log 2 (constant Jacobian)
        est_s = birkhoff_exponent(f, [0.3, 0.7], 50_000, flavor="stable")
        assert abs(est.value + est_s.value - math.log(2.0)) < 1e-2
