"""Leaf densities, adapted metrics, foliated boxes, and strip measures."""

import math

import numpy as np
import pytest

from anosovlab.errors import (
    InjectivityViolation,
    InsufficientScaleRange,
    NoIntersection,
    NonConvergence,
    NotOnSameLeaf,
)
from anosovlab.leaf_measures import (
    AdaptedMetric,
    LeafDensityEvaluator,
    WeightedLeafMeasure,
    adapted_distance,
    build_foliated_box,
    covering_height,
    disintegrate_volume,
    growth_constant,
    holonomy_transport_check,
    leaf_growth_ratio,
    pushforward_leaf_measure,
    quasi_preservation_ratio,
    rho,
    strip_fixed_point,
    theoremB_verdict,
    ubd_constant,
)
from anosovlab.splitting import grow_leaf_segment, quasi_isometry_constant
from anosovlab.conjugacy import build_conjugacy
from anosovlab.torus_map import IntMatrix2, make_raw

from families import certified

RNG = np.random.default_rng(77)


def _segment(f, flavor="unstable", base=(0.3, 0.4), halflength=0.4, h_max=1e-3):
    return grow_leaf_segment(f, np.array(base), flavor, halflength=halflength,
                             h_max=h_max)


class TestLeafProjection:
    def test_projection_is_small_and_idempotent(self):
        f, _ = certified("shear")
        for flavor in ("unstable", "stable"):
            seg = _segment(f, flavor)
            ev = LeafDensityEvaluator(f, seg)
            pts = seg.point_at(np.linspace(0.05, 0.75, 8))
            healed = ev.project_to_leaf(pts)
            # moves by at most the polyline interpolation error scale
            assert np.max(np.linalg.norm(healed - pts, axis=-1)) < 1e-5
            again = ev.project_to_leaf(healed)
            assert np.max(np.linalg.norm(again - healed, axis=-1)) < 1e-12

    def test_projected_points_stay_on_leaf_under_iteration(self):
        # transverse error is amplified one expansion factor per step, so a
        # true leaf point keeps contracting toward the base orbit
        f, _ = certified("shear")
        seg = _segment(f, "unstable")
        ev = LeafDensityEvaluator(f, seg)
        z = ev.project_to_leaf(
            np.vstack([seg.base_point, seg.point_at(np.array([0.2, 0.6]))]))
        for _ in range(16):
            z = f.invert_lift(z)
        assert np.max(np.linalg.norm(z[1:] - z[0], axis=-1)) < 1e-9


class TestLeafDensity:
    def test_linear_rho_is_one(self):
        f, _ = certified("linear")
        seg = _segment(f)
        ev = LeafDensityEvaluator(f, seg)
        ys = seg.point_at(np.linspace(0.1, 0.7, 5))
        vals = rho(ev, seg.base_point, ys)
        assert np.array_equal(vals, np.ones(5))
        assert ev.last_tail_bound == 0.0

    def test_membership_guard(self):
        f, _ = certified("shear")
        ev = LeafDensityEvaluator(f, _segment(f))
        with pytest.raises(NotOnSameLeaf):
            rho(ev, ev.segment.base_point, np.array([0.9, 0.9]))

    def test_rho_within_uniform_bound(self):
        f, _ = certified("shear")
        seg = _segment(f)
        ev = LeafDensityEvaluator(f, seg)
        ys = seg.point_at(np.linspace(0.0, 0.8, 9))
        vals = rho(ev, seg.base_point, ys)
        c0 = ev.uniform_bound(0.8)
        assert np.all(vals < c0) and np.all(vals > 1.0 / c0)

    def test_unstable_cocycle_identity(self):
        # rho(x, y) = [D^u(x')/D^u(y')] rho(x', y') on principal preimages
        tol = 1e-8
        for name in ("shear", "smooth"):
            f, _ = certified(name)
            seg = _segment(f)
            ev = LeafDensityEvaluator(f, seg)
            x = seg.base_point
            ys = ev.project_to_leaf(seg.point_at(np.linspace(0.05, 0.75, 10)))
            lr = np.array([ev.log_rho(x, y) for y in ys])
            xb = f.invert_lift(x)
            yb = f.invert_lift(ys)
            segb = grow_leaf_segment(f, xb, "unstable", halflength=0.25,
                                     h_max=1e-3)
            evb = LeafDensityEvaluator(f, segb)
            lrb = np.array([evb.log_rho(xb, y) for y in yb])
            du_x = np.log(evb.leaf_derivative(xb))
            du_y = np.log(evb.leaf_derivative(yb))
            resid = np.max(np.abs(du_x - du_y + lrb - lr))
            assert resid < tol
            assert ev.last_tail_bound < 1e-9

    def test_stable_cocycle_identity(self):
        # forward images are unconditional for the stable flavor; accuracy is
        # floored near 1e-6 by the expansion/contraction depth budget
        f, _ = certified("shear")
        seg = _segment(f, "stable")
        ev = LeafDensityEvaluator(f, seg)
        x = seg.base_point
        ys = ev.project_to_leaf(seg.point_at(np.linspace(0.05, 0.75, 10)))
        lr = np.array([ev.log_rho(x, y) for y in ys])
        fx = f.eval_lift(x)
        fys = f.eval_lift(ys)
        seg2 = grow_leaf_segment(f, fx, "stable", halflength=0.6, h_max=1e-3)
        ev2 = LeafDensityEvaluator(f, seg2)
        lr2 = np.array([ev2.log_rho(fx, fy) for fy in fys])
        ds_x = np.log(ev.leaf_derivative(x))
        ds_y = np.log(ev.leaf_derivative(ys))
        assert np.max(np.abs(lr2 - ds_x + ds_y - lr)) < 1e-5


class TestAdaptedMetric:
    def test_linear_distance_is_arclength(self):
        f, _ = certified("linear")
        seg = _segment(f, halflength=0.5)
        ev = LeafDensityEvaluator(f, seg)
        met = AdaptedMetric(ev)
        x = seg.base_point
        y = seg.point_at(seg.locate(x) + 0.35)
        assert abs(adapted_distance(met, x, y) - 0.35) < 1e-12
        assert met.symmetry_defect(x, y) < 1e-12

    def test_one_step_scaling(self):
        tol = 1e-6
        for name in ("shear", "smooth"):
            f, _ = certified(name)
            seg = _segment(f, halflength=0.5)
            ev = LeafDensityEvaluator(f, seg)
            met = AdaptedMetric(ev)
            x = seg.base_point
            y = ev.project_to_leaf(seg.point_at(seg.locate(x) + 0.35))
            d0 = met.distance(x, y)
            xb, yb = f.invert_lift(np.stack([x, y]))
            segb = grow_leaf_segment(f, xb, "unstable", halflength=0.3,
                                     h_max=1e-3)
            evb = LeafDensityEvaluator(f, segb)
            db = AdaptedMetric(evb).distance(xb, yb)
            assert abs(d0 - float(evb.leaf_derivative(xb)) * db) / d0 < tol

    def test_three_step_scaling(self):
        f, _ = certified("shear")
        seg = _segment(f, halflength=0.35)
        ev = LeafDensityEvaluator(f, seg)
        x = seg.base_point
        y = ev.project_to_leaf(seg.point_at(seg.locate(x) + 0.3))
        d0 = AdaptedMetric(ev).distance(x, y)
        pair = np.stack([x, y])
        for _ in range(3):
            pair = f.invert_lift(pair)
        segb = grow_leaf_segment(f, pair[0], "unstable", halflength=0.05,
                                 h_max=1e-3)
        db = AdaptedMetric(LeafDensityEvaluator(f, segb)).distance(*pair)
        z, prod = pair[0], 1.0
        for _ in range(3):
            e = LeafDensityEvaluator(
                f, grow_leaf_segment(f, z, "unstable", halflength=0.02,
                                     h_max=5e-4))
            prod *= float(e.leaf_derivative(z))
            z = f.eval_lift(z)
        assert abs(d0 - prod * db) / d0 < 1e-6

    def test_symmetry_defect_nonzero_off_base(self):
        f, _ = certified("shear")
        seg = _segment(f, halflength=0.5)
        ev = LeafDensityEvaluator(f, seg)
        met = AdaptedMetric(ev)
        x = seg.base_point
        y = ev.project_to_leaf(seg.point_at(seg.locate(x) + 0.35))
        assert met.symmetry_defect(x, y) > 1e-4

    def test_unreachable_target_raises(self):
        f, _ = certified("shear")
        seg = _segment(f, halflength=0.3)
        ev = LeafDensityEvaluator(f, seg)
        met = AdaptedMetric(ev, target=0.0)
        with pytest.raises(NonConvergence):
            met.distance(seg.base_point, ev.project_to_leaf(seg.point_at(0.5)))


class TestFoliatedBox:
    def test_linear_box_geometry(self):
        f, _ = certified("linear")
        box = build_foliated_box(f, np.array([0.5, 0.5]), 0.04, 0.25)
        assert len(box.leaves) == 8
        assert np.all(np.abs(box.leaf_offsets) < 0.04)
        assert len(box.boundaries) == 2

    def test_overlapping_leaves_raise(self):
        f, _ = certified("linear")
        with pytest.raises(InjectivityViolation):
            build_foliated_box(f, np.array([0.5, 0.5]), 0.04, 10.0)

    def test_sample_floor(self):
        f, _ = certified("linear")
        box = build_foliated_box(f, np.array([0.5, 0.5]), 0.04, 0.25)
        with pytest.raises(ValueError):
            disintegrate_volume(f, box, n_samples=5000)

    def test_linear_disintegration_uniform(self):
        f, _ = certified("linear")
        box = build_foliated_box(f, np.array([0.5, 0.5]), 0.04, 0.25)
        table = disintegrate_volume(f, box, n_samples=40_000, seed=3)
        assert abs(table.mass_identity - 1.0) < 1e-12
        occ = table.counts > 0
        dev = np.abs(table.densities - 1.0)[occ]
        assert np.all(dev < 3.5 * table.stderr[occ] + 1e-9)

    def test_smooth_disintegration_bounded(self):
        from anosovlab.leaf_measures import _thresholded_C

        f, _ = certified("smooth")
        box = build_foliated_box(f, np.array([0.5, 0.5]), 0.04, 0.25)
        table = disintegrate_volume(f, box, n_samples=20_000, seed=3)
        assert abs(table.mass_identity - 1.0) < 1e-12
        assert _thresholded_C(table) < 1.2


class TestUbd:
    def test_scale_and_center_floors(self):
        f, _ = certified("linear")
        centers = [np.array([0.5, 0.5])] * 10
        with pytest.raises(InsufficientScaleRange):
            ubd_constant(f, centers, scales=(1.0, 0.5))
        with pytest.raises(ValueError):
            ubd_constant(f, centers[:9], scales=(1.0, 0.5, 0.25))

    def test_linear_constant_near_one(self):
        f, _ = certified("linear")
        centers = RNG.uniform(0.1, 0.9, size=(10, 2))
        rep = ubd_constant(f, centers, scales=(1.0, 0.25, 0.0625),
                           n_samples=40_000, seed=5)
        assert abs(rep.C_estimate - 1.0) <= 0.05
        assert rep.flag == "UBD-consistent"
        assert rep.scales == sorted(rep.scales, reverse=True)
        # the debiased rms deviation has no signal for the linear map: below
        # the Monte Carlo floor at every scale
        assert len(rep.deviation_by_scale) == 3
        assert max(rep.deviation_by_scale) < 0.02
        assert rep.deviation_z[-1] < 5.0


class TestStrip:
    def test_linear_covering_height(self):
        f, _ = certified("linear")
        delta0, base = covering_height(f)
        assert base.flavor == "stable"
        assert 0.03 < delta0 < 0.08

    def test_linear_growth_ratio_constant(self):
        f, _ = certified("linear")
        delta0, _ = covering_height(f)
        ratios = leaf_growth_ratio(f, strip_fixed_point(f), k=8, delta0=delta0)
        assert np.max(np.abs(ratios - 1.0)) < 1e-9

    def test_negative_unstable_eigenvalue_uses_double_steps(self):
        f = make_raw(IntMatrix2(((-2, 1), (1, -1))), [])
        ratios = leaf_growth_ratio(f, np.array([0.0, 0.0]), k=3, delta0=0.05)
        assert np.max(np.abs(ratios - 1.0)) < 1e-9

    def test_smooth_growth_ratio_within_constant(self):
        f, _ = certified("smooth")
        H = build_conjugacy(f, tol=1e-8)
        disp = float(np.max(np.linalg.norm(
            H.displacement(RNG.uniform(size=(3000, 2))), axis=-1)))
        Q = max(quasi_isometry_constant(f, "unstable").values())
        delta0, _ = covering_height(f)
        K = growth_constant(Q, disp, 2.0 * delta0)
        ratios = leaf_growth_ratio(f, strip_fixed_point(f), k=8, delta0=delta0)
        assert np.all(ratios <= K) and np.all(ratios >= 1.0 / K)

    def test_growth_constant_rejects_short_fibers(self):
        with pytest.raises(ValueError):
            growth_constant(1.1, 0.3, 1.0)


class TestPushforward:
    def test_mass_scales_exactly(self):
        f, _ = certified("smooth_shear")
        lam_u = f.eigen_data()[0]
        seg = _segment(f, base=(0.2, 0.6), halflength=0.05, h_max=5e-4)
        mu = WeightedLeafMeasure.uniform(seg, 2000)
        for k in (1, 4, 8):
            nu = pushforward_leaf_measure(f, mu, k, alpha=1.0 / lam_u)
            assert abs(nu.mass - (1.0 / lam_u) ** k) < 1e-12

    def test_area_preserving_densities_stay_bounded(self):
        f, _ = certified("smooth_shear")
        lam_u = f.eigen_data()[0]
        seg = _segment(f, base=(0.2, 0.6), halflength=0.05, h_max=5e-4)
        mu = WeightedLeafMeasure.uniform(seg, 4000)
        nu = pushforward_leaf_measure(f, mu, 8, alpha=1.0 / lam_u)
        dens, _, _ = nu.density_table(16)
        assert np.all(dens > 0.5) and np.all(dens < 2.0)

    def test_linear_quasi_preservation_is_exact(self):
        f, _ = certified("linear")
        seg = _segment(f, base=(0.25, 0.55), halflength=0.1, h_max=5e-4)
        rep = quasi_preservation_ratio(f, seg, k=3, n_particles=20_000)
        assert abs(rep.min_ratio - 1.0) < 1e-9
        assert abs(rep.max_ratio - 1.0) < 1e-9

    def test_shear_quasi_preservation_brackets_one(self):
        f, _ = certified("shear")
        seg = _segment(f, base=(0.25, 0.55), halflength=0.1, h_max=5e-4)
        rep = quasi_preservation_ratio(f, seg, k=3, n_particles=20_000)
        assert rep.min_ratio < 1.0 < rep.max_ratio
        assert 0.5 < rep.min_ratio and rep.max_ratio < 2.0


class TestHolonomyTransport:
    def test_equivariance_residual_small(self):
        for name in ("linear", "smooth"):
            f, _ = certified(name)
            src = _segment(f, base=(0.3, 0.4), halflength=0.15, h_max=5e-4)
            dst = _segment(f, base=(0.3, 0.42), halflength=0.3, h_max=5e-4)
            mu = WeightedLeafMeasure.uniform(src, 8000)
            rep = holonomy_transport_check(f, mu, dst)
            assert rep.scaling_residual < 1e-10
            assert rep.fraction_inside == 1.0

    def test_same_leaf_transport_is_identity(self):
        f, _ = certified("linear")
        src = _segment(f, base=(0.3, 0.4), halflength=0.15, h_max=5e-4)
        mu = WeightedLeafMeasure.uniform(src, 4000)
        rep = holonomy_transport_check(f, mu, src)
        assert rep.scaling_residual < 1e-10
        dens, _, _ = mu.density_table(16)
        assert np.max(np.abs(rep.density - dens)) < 1e-10

    def test_disjoint_segments_raise(self):
        f, _ = certified("linear")
        src = _segment(f, base=(0.1, 0.1), halflength=0.05, h_max=5e-4)
        dst = _segment(f, base=(0.5, 0.5), halflength=0.01, h_max=5e-4)
        mu = WeightedLeafMeasure.uniform(src, 500)
        with pytest.raises(NoIntersection):
            holonomy_transport_check(f, mu, dst)


class TestVerdict:
    def test_linear_is_consistent(self):
        f, _ = certified("linear")
        v = theoremB_verdict(f, max_period=2, birkhoff_N=20_000)
        assert v.summary == "consistent"
        assert v.constant_jacobian == pytest.approx(2.0)

    def test_shear_is_contrapositive_consistent(self):
        f, _ = certified("shear")
        v = theoremB_verdict(f, max_period=2, birkhoff_N=20_000)
        assert v.summary == "contrapositive-consistent"
        assert v.exponent_spread > 0.1
