"""Leaf densities, adapted metrics, foliated boxes, and strip measures.

The leaf density rho(x, y) is an infinite product of leafwise-derivative
ratios along past (unstable flavor) or future (stable flavor) orbits,
accumulated in log space with an explicit geometric tail bound.  The adapted
metric integrates rho along a leaf segment by Gauss quadrature.  Foliated
boxes support Monte Carlo disintegration of volume and the uniform
bounded-density (UBD) estimate; the strip apparatus measures leaf growth,
pushforward measures, and holonomy transport at finite iteration depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InjectivityViolation,
    InsufficientScaleRange,
    NoIntersection,
    NonConvergence,
    NotOnSameLeaf,
)
from .periodic_data import (
    BirkhoffEstimate,
    birkhoff_exponent,
    continue_periodic_orbit,
    specialness_diagnostic,
)
from .splitting import (
    LeafSegment,
    _cum_arclength,
    _resample,
    grow_leaf_segment,
    stable_direction,
    unstable_direction,
)
from .torus_map import ToralEndomorphism, reduce_mod1, torus_distance

RHO_DEPTH_CAP = 80
RHO_FACTOR_TOL = 1e-15
QUAD_TARGET = 1e-9
POLYLINE_CAP = 200_000


def _mu_pair(f: ToralEndomorphism) -> tuple:
    """Certified (expansion, contraction) one-step rates, eigen fallback."""
    cert = f.certificate
    if cert is not None:
        return cert.mu_u, cert.mu_s
    lam_u, lam_s, _, _ = f.eigen_data()
    return 0.7 * abs(lam_u), min(0.99, abs(lam_s) / 0.7)


# ---------------------------------------------------------------------------
# leaf density rho


class LeafDensityEvaluator:
    """Evaluates the leaf density rho(x, y) on a grown leaf segment.

    Unstable flavor: rho(x,y) = prod_{n>=1} D^u(F^{-n} x) / D^u(F^{-n} y)
    along the principal backward branch on the cover (the same branch used to
    grow the segment).  With x' = F^{-1}x, y' = F^{-1}y the principal
    preimages, rho(x, y) = [D^u(x')/D^u(y')] rho(x', y'); the forward-image
    form of the identity only holds where F maps the principal branch to the
    principal branch, since the map is 2-to-1 on the torus.  Stable flavor
    mirrors this with F and F^{-1} exchanged, which turns the product into
    one over reduced forward orbits and makes the identity
    rho(Fx, Fy) = [D^s(x)/D^s(y)] rho(x, y) unconditional.
    """

    def __init__(self, f: ToralEndomorphism, segment: LeafSegment,
                 tol: float = 1e-12):
        f.require_anosov()
        self.f = f
        self.segment = segment
        self.flavor = segment.flavor
        self.tol = float(tol)
        self.last_tail_bound = 0.0
        self.last_depth = 0
        lam_u, lam_s, basis, basis_inv = f.eigen_data()
        self.lam_u = lam_u
        self.lam_s = lam_s
        self.basis = basis
        self.basis_inv = basis_inv

    # -- membership -----------------------------------------------------------

    def _check_on_segment(self, pts: np.ndarray):
        verts = self.segment.vertices
        a = verts[:-1]
        chord = verts[1:] - a
        clen2 = np.maximum(np.sum(chord * chord, axis=-1), 1e-300)
        p = pts.reshape(-1, 2)
        t = np.clip((np.sum(p[:, None, :] * chord[None], axis=-1)
                     - np.sum(a * chord, axis=-1)) / clen2, 0.0, 1.0)
        proj = a + t[..., None] * chord
        d2 = np.sum((proj - p[:, None, :]) ** 2, axis=-1)
        dist = np.sqrt(np.min(d2, axis=-1))
        worst = float(np.max(dist))
        if worst > self.segment.h_max:
            raise NotOnSameLeaf(
                f"point at distance {worst:.3e} from the owning segment"
            )

    # -- leaf projection -------------------------------------------------------

    def project_to_leaf(self, pts, passes: Optional[Sequence[int]] = None) -> np.ndarray:
        """Remove the transverse component of pts relative to the true leaf.

        Query points carry an off-leaf error of order h_max^2 from polyline
        interpolation, which the orbit iterations underlying rho amplify.
        Each pass measures the deviation from the reference leaf (through the
        segment base) m steps into the contracting direction, where the
        leafwise part has shrunk geometrically, reads off the transverse
        component along the contracting direction at the point's own orbit,
        and transports that correction vector back through the derivative
        cocycle.  The contracting direction is Df-invariant, so the transport
        is exact and never perturbs the leafwise position; the correction is
        subtracted at the original point.  The transverse error is amplified
        by the pass depth before it is measured, so the stable flavor starts
        shallow and deepens as the error shrinks.
        """
        pts = np.asarray(pts, dtype=float)
        if passes is None:
            passes = (12, 12) if self.flavor == "unstable" else (7, 10, 14)
        out = pts
        for m in passes:
            out = self._heal_once(out, m)
        return out

    def _heal_once(self, pts: np.ndarray, m: int) -> np.ndarray:
        f = self.f
        a = pts.copy()
        b = np.broadcast_to(self.segment.base_point, pts.shape).copy()
        unstable = self.flavor == "unstable"
        orbit = [a]
        if unstable:
            # true backward orbits on the cover (branch coherence)
            for _ in range(m):
                a = f.invert_lift(a)
                b = f.invert_lift(b)
                orbit.append(a)
        else:
            # reduced forward orbits (the perturbation is Z^2-periodic, so
            # joint integer shifts commute with the forward map exactly)
            for _ in range(m):
                a = f.eval_lift(a)
                b = f.eval_lift(b)
                shift = np.floor(b)
                a = a - shift
                b = b - shift
                orbit.append(a)
        if unstable:
            # the stable direction is a pointwise field, so it can be read
            # off at the deep point and pushed forward exactly (Df-invariant)
            trans = stable_direction(f, a, tol=1e-13).direction
            leafw = unstable_direction(f, b, tol=1e-13).direction
            frame = np.stack([leafw, trans], axis=-1)
            coeff = np.linalg.solve(frame, (a - b)[..., None])[..., 0]
            v = coeff[..., 1:] * trans
            for k in range(m, 0, -1):
                d = f.derivative(reduce_mod1(orbit[k]))
                v = (d @ v[..., None])[..., 0]
            return pts - v
        # the unstable direction at a_m depends on the backward history, so
        # the transversal is taken at the original point and pushed forward
        # along this orbit; the measured coefficient pulls back by the same
        # scalar cocycle, which retraces the push exactly
        u0 = unstable_direction(f, pts, tol=1e-13).direction
        w = u0.copy()
        gain = np.ones(pts.shape[:-1] + (1,))
        for k in range(m):
            d = f.derivative(orbit[k])
            w = (d @ w[..., None])[..., 0]
            nrm = np.linalg.norm(w, axis=-1, keepdims=True)
            gain = gain * nrm
            w = w / nrm
        leafw = stable_direction(f, b, tol=1e-13).direction
        frame = np.stack([leafw, w], axis=-1)
        coeff = np.linalg.solve(frame, (a - b)[..., None])[..., 0]
        return pts - (coeff[..., 1:] / gain) * u0

    # -- log-factor tables ----------------------------------------------------

    def _log_factors_unstable(self, pts: np.ndarray, depth: int,
                              buf: int) -> np.ndarray:
        """log D^u at F^{-n} p for n = 1..depth, shape (depth, n_pts)."""
        f = self.f
        orbit = [pts]
        for _ in range(depth + buf):
            orbit.append(f.invert_lift(orbit[-1]))
        v = np.broadcast_to(self.basis[:, 0], pts.shape).copy()
        out = np.empty((depth,) + pts.shape[:-1])
        for n in range(depth + buf, 0, -1):
            d = f.derivative(reduce_mod1(orbit[n]))
            w = (d @ v[..., None])[..., 0]
            nw = np.linalg.norm(w, axis=-1)
            if n <= depth:
                out[n - 1] = np.log(nw)
            v = w / nw[..., None]
        return out

    def _log_factors_stable(self, pts: np.ndarray, depth: int,
                            buf: int) -> np.ndarray:
        """log D^s at F^n p for n = 0..depth-1, shape (depth, n_pts)."""
        f = self.f
        orbit = [reduce_mod1(pts)]
        for _ in range(depth + buf):
            orbit.append(reduce_mod1(f.eval_lift(orbit[-1])))
        v = np.broadcast_to(self.basis[:, 1], pts.shape).copy()
        out = np.empty((depth,) + pts.shape[:-1])
        for n in range(depth + buf - 1, -1, -1):
            d = f.derivative(orbit[n])
            w = np.linalg.solve(d, v[..., None])[..., 0]
            nw = np.linalg.norm(w, axis=-1)
            if n < depth:
                out[n] = -np.log(nw)
            v = w / nw[..., None]
        return out

    def _depths(self, sep0: float) -> tuple:
        mu_u, mu_s = _mu_pair(self.f)
        rate = math.log(mu_u) if self.flavor == "unstable" else -math.log(mu_s)
        sep0 = max(sep0, 1e-16)
        depth = int(math.ceil((math.log(sep0) - math.log(RHO_FACTOR_TOL)) / rate)) + 2
        depth = min(RHO_DEPTH_CAP, max(5, depth))
        # direction-seeding buffer: cone iteration contracts by mu_s/mu_u
        buf = int(math.ceil(math.log(1e14) / math.log(mu_u / mu_s)))
        return depth, min(40, max(10, buf))

    def log_rho(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        yf = y.reshape(-1, 2)
        pts = np.concatenate([x[None, :], yf], axis=0)
        sep0 = float(np.max(np.linalg.norm(yf - x, axis=-1)))
        if sep0 == 0.0:
            self.last_tail_bound = 0.0
            return np.zeros(y.shape[:-1])
        pts = self.project_to_leaf(pts)
        depth, buf = self._depths(sep0)
        if self.flavor == "unstable":
            logs = self._log_factors_unstable(pts, depth, buf)
            diffs = logs[:, :1] - logs[:, 1:]
        else:
            logs = self._log_factors_stable(pts, depth, buf)
            diffs = logs[:, 1:] - logs[:, :1]
        mu_u, mu_s = _mu_pair(self.f)
        r = 1.0 / mu_u if self.flavor == "unstable" else mu_s
        # truncate each product at the transverse-noise floor: beyond it the
        # amplified off-leaf error dominates the geometrically decaying terms
        mag = np.abs(diffs)
        small = mag < RHO_FACTOR_TOL
        first_small = np.where(small.any(axis=0), small.argmax(axis=0),
                               depth - 1)
        cut = np.minimum(first_small, np.argmin(mag, axis=0))
        rows = np.arange(depth)[:, None]
        total = np.sum(np.where(rows <= cut[None, :], diffs, 0.0), axis=0)
        floor_mag = mag[cut, np.arange(mag.shape[1])]
        self.last_tail_bound = float(np.max(floor_mag)) * 2.0 * r / (1.0 - r)
        self.last_depth = depth
        return total.reshape(y.shape[:-1])

    def leaf_derivative(self, pts) -> np.ndarray:
        """D^sigma_F = ||DF e^sigma|| at pts (batched), matching the flavor."""
        pts = self.project_to_leaf(np.asarray(pts, dtype=float))
        fn = unstable_direction if self.flavor == "unstable" else stable_direction
        e = fn(self.f, pts, tol=1e-12).direction
        w = (self.f.derivative(pts) @ e[..., None])[..., 0]
        return np.linalg.norm(w, axis=-1)

    def uniform_bound(self, leaf_distance: float) -> float:
        """C0 with C0^{-1} < rho < C0 for pairs at leaf distance <= the bound."""
        mu_u, mu_s = _mu_pair(self.f)
        if self.flavor == "unstable":
            floor = mu_u
        else:
            # D^s >= sigma_min(DF) >= |det DF| / ||DF||
            det = self.f.constant_jacobian
            det = abs(det) if det is not None else 0.5 * abs(self.f.linear.det)
            floor = det / self.f.deriv_sup_bound()
        lip = self.f.deriv_lip_bound() / floor
        denom = mu_u - 1.0 if self.flavor == "unstable" else 1.0 / mu_s - 1.0
        return math.exp(lip * leaf_distance / denom)


def rho(evaluator: LeafDensityEvaluator, x, y, checked: bool = False) -> np.ndarray:
    """Leaf density rho(x, y), batched over y; rho(x, x) = 1 exactly."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not checked:
        evaluator._check_on_segment(np.concatenate([x[None], y.reshape(-1, 2)]))
    return np.exp(evaluator.log_rho(x, y))


# ---------------------------------------------------------------------------
# adapted metric


class AdaptedMetric:
    """d(x, y) = integral over the leaf from x to y of rho(x, z) darclength."""

    def __init__(self, evaluator: LeafDensityEvaluator, order: int = 8,
                 panel_width: float = 0.05, target: float = QUAD_TARGET):
        self.evaluator = evaluator
        self.segment = evaluator.segment
        self.order = int(order)
        self.panel_width = float(panel_width)
        self.target = float(target)
        self.last_error = 0.0
        self._nodes, self._weights = np.polynomial.legendre.leggauss(self.order)

    def _quad(self, x: np.ndarray, lo: float, hi: float, n_panels: int) -> float:
        edges = np.linspace(lo, hi, n_panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1] - edges[0])
        s = (mid[:, None] + half * self._nodes[None, :]).ravel()
        vals = rho(self.evaluator, x, self.segment.point_at(s), checked=True)
        w = np.broadcast_to(half * self._weights, (n_panels, self.order)).ravel()
        return float(np.sum(w * vals))

    def distance(self, x, y) -> float:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        s0 = self.segment.locate(x)
        s1 = self.segment.locate(y)
        lo, hi = min(s0, s1), max(s0, s1)
        if lo == hi:
            self.last_error = 0.0
            return 0.0
        n = max(1, int(math.ceil((hi - lo) / self.panel_width)))
        prev = self._quad(x, lo, hi, n)
        for _ in range(4):
            n *= 2
            cur = self._quad(x, lo, hi, n)
            self.last_error = abs(cur - prev)
            prev = cur
            if self.last_error < self.target:
                return cur
        raise NonConvergence(
            f"adapted-metric quadrature error {self.last_error:.2e} above target"
        )

    def symmetry_defect(self, x, y) -> float:
        """|d(x,y) - d(y,x)|: the integral formula anchors rho at its first
        argument, so symmetry holds only up to leaf-density variation."""
        return abs(self.distance(x, y) - self.distance(y, x))


def adapted_distance(metric: AdaptedMetric, x, y) -> float:
    return metric.distance(x, y)


# ---------------------------------------------------------------------------
# eigen-coordinate holonomy matching


def _match_steps(f: ToralEndomorphism, amplification: float = 1e9) -> int:
    mu_u, mu_s = _mu_pair(f)
    return min(40, max(5, math.ceil(math.log(amplification)
                                    / math.log(mu_u / mu_s))))


def holonomy_coordinates(f: ToralEndomorphism, seg: LeafSegment, pts,
                         amplification: float = 1e9):
    """Arclength on seg of the holonomy projection of each point, batched.

    For an unstable segment the projection slides along stable leaves: after
    K forward steps the surviving separation is the unstable eigen-coordinate,
    matched against the segment's vertices by monotone interpolation.  For a
    stable segment the roles are mirrored under backward iteration.  Returns
    (coords, inside): coords are absolute arclength values on seg; inside is
    False where the projection leaves the segment (coords are then clamped).
    """
    f.require_anosov()
    pts = np.asarray(pts, dtype=float)
    steps = _match_steps(f, amplification)
    _, _, basis, basis_inv = f.eigen_data()
    a = seg.vertices.copy()
    b = pts.reshape(-1, 2).copy()
    if seg.flavor == "unstable":
        for _ in range(steps):
            a = f.eval_lift(a)
            b = f.eval_lift(b)
            m = np.floor(a[seg.base_index])
            a -= m
            b -= m
        row = basis_inv[0]
    else:
        for _ in range(steps):
            a = f.invert_lift(a)
            b = f.invert_lift(b)
            m = np.floor(a[seg.base_index])
            a -= m
            b -= m
        row = basis_inv[1]
    c_verts = a @ row
    c_pts = b @ row
    d = np.diff(c_verts)
    if np.all(d > 0.0):
        pass
    elif np.all(d < 0.0):
        c_verts = c_verts[::-1]
        cum = seg.cum_arclength[::-1].copy()
        coords = np.interp(c_pts, c_verts, cum)
        inside = (c_pts >= c_verts[0]) & (c_pts <= c_verts[-1])
        return coords.reshape(pts.shape[:-1]), inside.reshape(pts.shape[:-1])
    else:
        raise NonConvergence(
            "holonomy matching: eigen-coordinate not monotone along segment"
        )
    coords = np.interp(c_pts, c_verts, seg.cum_arclength)
    inside = (c_pts >= c_verts[0]) & (c_pts <= c_verts[-1])
    return coords.reshape(pts.shape[:-1]), inside.reshape(pts.shape[:-1])


# ---------------------------------------------------------------------------
# foliated boxes


@dataclass
class FoliatedBox:
    center: np.ndarray
    delta_s: float
    delta_u: float
    transversal: LeafSegment          # stable segment through the center
    leaves: list                      # M unstable LeafSegments
    leaf_offsets: np.ndarray          # (M,) transversal arclength offsets
    boundaries: tuple                 # two stable segments at u = +-delta_u

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)


def _segment_crossings(seg_a: LeafSegment, seg_b: LeafSegment) -> int:
    """Number of proper chord intersections between two polylines."""
    p = seg_a.vertices[:-1]
    r = seg_a.vertices[1:] - p
    q = seg_b.vertices[:-1]
    s = seg_b.vertices[1:] - q
    # solve p + t r = q + v s chordwise; count 0<=t,v<=1 with nonparallel chords
    rxs = r[:, None, 0] * s[None, :, 1] - r[:, None, 1] * s[None, :, 0]
    qp = q[None, :, :] - p[:, None, :]
    qpxs = qp[..., 0] * s[None, :, 1] - qp[..., 1] * s[None, :, 0]
    qpxr = qp[..., 0] * r[:, None, 1] - qp[..., 1] * r[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = qpxs / rxs
        v = qpxr / rxs
    hit = (np.abs(rxs) > 1e-14) & (t >= 0.0) & (t < 1.0) & (v >= 0.0) & (v < 1.0)
    return int(np.count_nonzero(hit))


def _injectivity_check(box: FoliatedBox, spacing: float):
    """Projected leaves must stay pairwise and self separated."""
    tau = min(0.35 * spacing, 0.02)
    cell = tau
    table = {}
    for i, leaf in enumerate(box.leaves):
        n_sub = max(2, int(math.ceil(leaf.length / (0.5 * tau))))
        s = np.linspace(0.0, leaf.length, min(n_sub, 40_000))
        pts = reduce_mod1(leaf.point_at(s))
        keys = np.floor(pts / cell).astype(int)
        for k, (key, arc, pt) in enumerate(zip(map(tuple, keys), s, pts)):
            bucket = table.setdefault(key, [])
            for (j, arc2, pt2) in bucket:
                d = float(np.min(np.linalg.norm(
                    (pt - pt2 + 0.5) % 1.0 - 0.5)))
                d = float(np.linalg.norm((pt - pt2 + 0.5) % 1.0 - 0.5))
                if d >= tau:
                    continue
                if j != i:
                    raise InjectivityViolation(
                        f"leaves {j} and {i} overlap in projection "
                        f"(distance {d:.2e} < {tau:.2e})"
                    )
                if abs(arc - arc2) > 4.0 * tau:
                    raise InjectivityViolation(
                        f"leaf {i} self-intersects in projection "
                        f"(distance {d:.2e} at arclength gap {abs(arc - arc2):.2f})"
                    )
            bucket.append((i, arc, pt))


def build_foliated_box(f: ToralEndomorphism, center, delta_s: float,
                       delta_u: float, n_leaves: int = 8,
                       h_max: float = 2e-3) -> FoliatedBox:
    """Foliated box: M unstable segments through a stable transversal."""
    f.require_anosov()
    center = np.asarray(center, dtype=float)
    trans = grow_leaf_segment(f, center, "stable", halflength=delta_s,
                              h_max=min(h_max, delta_s / 8.0))
    m = n_leaves
    offsets = (2.0 * (np.arange(m) + 0.5) / m - 1.0) * delta_s
    bases = trans.point_at(trans.base_arclength + offsets)
    leaf_h = min(h_max, delta_u / 8.0)
    leaves = [grow_leaf_segment(f, b, "unstable", halflength=1.1 * delta_u,
                                h_max=leaf_h) for b in bases]
    # expected stable spacing between adjacent leaves
    spacing = 2.0 * delta_s / m
    box_tmp = FoliatedBox(center=center, delta_s=delta_s, delta_u=delta_u,
                          transversal=trans, leaves=leaves,
                          leaf_offsets=offsets, boundaries=())
    _injectivity_check(box_tmp, spacing)
    # stable boundary transversals at the unstable edges of the center fiber
    center_leaf = grow_leaf_segment(f, center, "unstable",
                                    halflength=1.05 * delta_u, h_max=leaf_h)
    edges = center_leaf.point_at(center_leaf.base_arclength
                                 + np.array([-delta_u, delta_u]))
    bounds = tuple(grow_leaf_segment(f, e, "stable", halflength=1.3 * delta_s,
                                     h_max=min(h_max, delta_s / 8.0))
                   for e in edges)
    box = FoliatedBox(center=center, delta_s=delta_s, delta_u=delta_u,
                      transversal=trans, leaves=leaves,
                      leaf_offsets=offsets, boundaries=bounds)
    for i, leaf in enumerate(leaves):
        for b, bound in enumerate(bounds):
            k = _segment_crossings(leaf, bound)
            if k != 1:
                raise InjectivityViolation(
                    f"leaf {i} crosses boundary transversal {b} {k} times"
                )
    return box


# ---------------------------------------------------------------------------
# disintegration of volume


@dataclass
class DisintegrationTable:
    box: FoliatedBox
    bin_edges: np.ndarray      # (bins+1,) in normalized arclength
    densities: np.ndarray      # (M, bins), conditional density vs lambda-hat
    stderr: np.ndarray         # (M, bins)
    counts: np.ndarray         # (M, bins) raw counts
    leaf_weights: np.ndarray   # (M,), transverse weights summing to 1
    n_inside: int

    @property
    def mass_identity(self) -> float:
        """Sum over leaves of conditional leaf mass x transverse weight."""
        with np.errstate(invalid="ignore"):
            leaf_mass = np.where(self.counts.sum(axis=1) > 0, 1.0, 0.0)
        return float(np.sum(self.leaf_weights * leaf_mass))


def disintegrate_volume(f: ToralEndomorphism, box: FoliatedBox,
                        n_samples: int = 10_000, bins: int = 32,
                        seed: int = 0) -> DisintegrationTable:
    """Monte Carlo disintegration of volume over the box's unstable leaves.

    Uniform points in the box are assigned a stable coordinate (arclength of
    the unstable-holonomy projection onto the transversal) and an unstable
    coordinate (arclength of the stable-holonomy projection onto the assigned
    leaf), then binned per leaf against normalized arclength.
    """
    if n_samples < 10_000:
        raise ValueError("disintegration requires n_samples >= 10^4")
    rng = np.random.default_rng(seed)
    m = box.n_leaves
    all_verts = np.concatenate([leaf.vertices for leaf in box.leaves])
    lo = all_verts.min(axis=0)
    hi = all_verts.max(axis=0)
    u_chunks = []
    leaf_chunks = []
    collected = 0
    guard = 0
    while collected < n_samples:
        guard += 1
        if guard > 60:
            raise NonConvergence("box sampling acceptance too low")
        draw = rng.uniform(lo, hi, size=(2 * n_samples, 2))
        s, s_in = holonomy_coordinates(f, box.transversal, draw)
        s = s - box.transversal.base_arclength
        keep = s_in & (np.abs(s) <= box.delta_s)
        draw = draw[keep]
        s = s[keep]
        leaf_idx = np.minimum((m * (s + box.delta_s)
                               / (2.0 * box.delta_s)).astype(int), m - 1)
        u = np.empty(len(draw))
        u_in = np.zeros(len(draw), dtype=bool)
        for i in range(m):
            sel = leaf_idx == i
            if not np.any(sel):
                continue
            ui, ok = holonomy_coordinates(f, box.leaves[i], draw[sel])
            ui = ui - box.leaves[i].base_arclength
            u[sel] = ui
            u_in[sel] = ok & (np.abs(ui) <= box.delta_u)
        u_chunks.append(u[u_in])
        leaf_chunks.append(leaf_idx[u_in])
        collected += int(np.count_nonzero(u_in))
    u_vals = np.concatenate(u_chunks)[:n_samples]
    leaf_all = np.concatenate(leaf_chunks)[:n_samples]
    lam_hat = (u_vals + box.delta_u) / (2.0 * box.delta_u)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros((m, bins))
    for i in range(m):
        counts[i] = np.histogram(lam_hat[leaf_all == i], bins=edges)[0]
    n_leaf = counts.sum(axis=1)
    weights = n_leaf / n_samples
    with np.errstate(divide="ignore", invalid="ignore"):
        p = counts / n_leaf[:, None]
        dens = p * bins
        se = bins * np.sqrt(np.maximum(p * (1.0 - p), 0.0)
                            / np.maximum(n_leaf[:, None], 1))
    dens = np.nan_to_num(dens)
    return DisintegrationTable(box=box, bin_edges=edges, densities=dens,
                               stderr=se, counts=counts, leaf_weights=weights,
                               n_inside=int(n_samples))


# ---------------------------------------------------------------------------
# UBD estimate


@dataclass
class UbdReport:
    scales: list               # box size multipliers, coarse to fine
    centers: list
    C_by_scale: list
    C_estimate: float
    flag: str
    bins: int
    n_samples: int
    deviation_by_scale: list = field(default_factory=list)
    deviation_z: list = field(default_factory=list)
    box_tables: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        assert self.C_estimate >= 1.0


def _thresholded_C(table: DisintegrationTable) -> float:
    """Max deviation of binned densities from 1, discounted by 3 stderr.

    The discount keeps pure Monte Carlo noise from inflating the estimate;
    a bin contributes only the statistically significant part of its
    deviation.  Two witnesses are combined: the per-leaf bins, and the
    leaf-pooled profile (holonomy distortion is coherent across the leaves
    of a box, so pooling cuts the noise without diluting that signal; any
    pooled deviation is a lower bound for some leaf's deviation).
    """
    occupied = table.counts > 0
    hi = np.maximum(table.densities - 3.0 * table.stderr, 1.0)
    lo = np.minimum(table.densities + 3.0 * table.stderr, 1.0)
    lo = np.where(occupied, lo, 1.0)
    hi = np.where(occupied, hi, 1.0)
    c = max(float(np.max(hi)), float(1.0 / np.min(np.maximum(lo, 1e-6))))
    col_counts = table.counts.sum(axis=0)
    total = float(col_counts.sum())
    if total > 0:
        bins = table.counts.shape[1]
        p = col_counts / total
        dens = p * bins
        se = bins * np.sqrt(np.maximum(p * (1.0 - p), 0.0) / total)
        pocc = col_counts > 0
        phi = np.where(pocc, np.maximum(dens - 3.0 * se, 1.0), 1.0)
        plo = np.where(pocc, np.minimum(dens + 3.0 * se, 1.0), 1.0)
        c = max(c, float(np.max(phi)),
                float(1.0 / np.min(np.maximum(plo, 1e-6))))
    return max(c, 1.0)


def ubd_constant(f: ToralEndomorphism, centers: Sequence, scales: Sequence[float],
                 delta_s: float = 0.04, delta_u: float = 0.25,
                 n_leaves: int = 6, n_samples: int = 20_000, bins: int = 16,
                 seed: int = 0) -> UbdReport:
    """UBD constant estimate over an ensemble of foliated boxes.

    scales multiply the base (delta_s, delta_u); the report orders them from
    coarse to fine.  Two statistics are tracked per scale: the thresholded
    max density deviation (C_by_scale, an upper estimate of the bound) and a
    noise-debiased rms deviation D with a z-score against the Monte Carlo
    floor (E[(dens - 1)^2] = signal^2 + stderr^2, so subtracting stderr^2
    estimates the true deviation power even below the per-bin threshold).
    A bounded-density disintegration has D -> 0 as the boxes shrink; a
    significant rms deviation that persists down to the finest scale is
    flagged as a violating trend.
    """
    centers = [np.asarray(c, dtype=float) for c in centers]
    scales = sorted(float(s) for s in scales)
    if len(scales) < 3:
        raise InsufficientScaleRange("UBD estimation requires >= 3 box scales")
    if len(centers) < 10:
        raise ValueError("UBD estimation requires >= 10 box centers")
    scales = scales[::-1]  # coarse (large) to fine (small)
    c_by_scale = []
    d_by_scale = []
    z_by_scale = []
    tables = []
    for si, scale in enumerate(scales):
        worst = 1.0
        power, floor4, n_bins = 0.0, 0.0, 0
        for ci, center in enumerate(centers):
            box = build_foliated_box(f, center, delta_s * scale,
                                     delta_u * scale, n_leaves=n_leaves)
            # substream seed per (scale, center), independent of schedule
            sub = seed * 1_000_003 + si * 1009 + ci
            table = disintegrate_volume(f, box, n_samples=n_samples,
                                        bins=bins, seed=sub)
            worst = max(worst, _thresholded_C(table))
            occ = table.counts > 0
            dev = (table.densities - 1.0)[occ]
            se = table.stderr[occ]
            power += float(np.sum(dev ** 2 - se ** 2))
            floor4 += float(np.sum(se ** 4))
            n_bins += int(np.count_nonzero(occ))
            tables.append((scale, ci, table))
        c_by_scale.append(worst)
        d2 = power / n_bins
        d_by_scale.append(math.sqrt(max(d2, 0.0)))
        z_by_scale.append(d2 / (math.sqrt(2.0 * floor4) / n_bins))
    # a density bound forces the rms deviation to vanish with the box size;
    # roughness that stays significant at the finest scale violates it
    fine_significant = z_by_scale[-1] >= 5.0
    persists = d_by_scale[-1] >= 0.7 * max(d_by_scale)
    if fine_significant and persists:
        flag = "UBD-violating trend"
    elif not fine_significant or d_by_scale[-1] < 0.5 * max(d_by_scale):
        flag = "UBD-consistent"
    else:
        flag = "inconclusive"
    return UbdReport(scales=list(scales), centers=[tuple(c) for c in centers],
                     C_by_scale=c_by_scale, C_estimate=max(c_by_scale),
                     flag=flag, bins=bins, n_samples=n_samples,
                     deviation_by_scale=d_by_scale, deviation_z=z_by_scale,
                     box_tables=tables)


# ---------------------------------------------------------------------------
# strip apparatus: fixed point, covering height, leaf growth


def strip_fixed_point(f: ToralEndomorphism) -> np.ndarray:
    """The fixed point of f continued from the origin (fixed for L)."""
    orbit = continue_periodic_orbit(f, [(0, 0)])
    return orbit.points[0]


def covering_height(f: ToralEndomorphism, base_halflength: float = 5.0,
                    grid: int = 24, base_spacing: float = 0.02,
                    bisection_steps: int = 18):
    """Smallest fiber half-height delta0 whose strip projection covers T^2.

    The strip is the union of unstable fibers over the stable leaf of the
    fixed point.  Fibers are straightened for the cover test (curvature is
    second order in the height); coverage means every cell of a grid x grid
    partition of the torus contains a fiber sample.  Returns (delta0, base).
    """
    f.require_anosov()
    fp = strip_fixed_point(f)
    base = grow_leaf_segment(f, fp, "stable", halflength=base_halflength,
                             h_max=5e-3)
    n_base = max(2, int(math.ceil(base.length / base_spacing)))
    s = np.linspace(0.0, base.length, n_base)
    pts = base.point_at(s)
    dirs = unstable_direction(f, pts, tol=1e-10).direction

    def covered(delta: float) -> bool:
        n_off = max(3, int(math.ceil(4.0 * delta * grid)) + 1)
        offs = np.linspace(-delta, delta, n_off)
        cloud = pts[:, None, :] + offs[None, :, None] * dirs[:, None, :]
        cells = np.floor(reduce_mod1(cloud.reshape(-1, 2)) * grid).astype(int)
        cells = np.clip(cells, 0, grid - 1)
        return len(np.unique(cells[:, 0] * grid + cells[:, 1])) == grid * grid

    hi = 0.1
    while not covered(hi):
        hi *= 2.0
        if hi > 4.0:
            raise NonConvergence(
                "strip projection does not cover the torus; grow the base leaf"
            )
    lo = 0.0 if hi == 0.1 else hi / 2.0
    for _ in range(bisection_steps):
        mid = 0.5 * (lo + hi)
        if covered(mid):
            hi = mid
        else:
            lo = mid
    return hi, base


def _push_polyline(f: ToralEndomorphism, verts: np.ndarray,
                   h_target: float) -> np.ndarray:
    """One F-step of a leaf polyline, resampled to a bounded vertex budget."""
    new = f.eval_lift(verts)
    cum = _cum_arclength(new)
    h = max(h_target, float(cum[-1]) / POLYLINE_CAP)
    n = max(33, int(math.ceil(float(cum[-1]) / h)) + 1)
    return _resample(new, np.linspace(0.0, float(cum[-1]), n))


def leaf_growth_ratio(f: ToralEndomorphism, x, k: int, delta0: float,
                      h_max: float = 2e-3) -> np.ndarray:
    """Arclength of F^j(fiber through x) over alpha^j, normalized at j = 0.

    The fiber is the unstable segment of half-height delta0 through x; the
    returned array holds ratios for j = 0..k.  When lambda_u < -1 each step
    applies F twice (orientation along the fiber is otherwise reversed) and
    alpha = lambda_u^2.
    """
    f.require_anosov()
    lam_u, _, _, _ = f.eigen_data()
    double = lam_u < 0.0
    alpha = lam_u * lam_u if double else lam_u
    seg = grow_leaf_segment(f, np.asarray(x, dtype=float), "unstable",
                            halflength=delta0, h_max=h_max)
    verts = seg.vertices
    base_len = seg.length
    ratios = [1.0]
    length = base_len
    for j in range(1, k + 1):
        verts = _push_polyline(f, verts, h_max)
        if double:
            verts = _push_polyline(f, verts, h_max)
        length = float(_cum_arclength(verts)[-1])
        ratios.append(length / (alpha ** j * base_len))
    return np.asarray(ratios)


def growth_constant(Q: float, displacement_sup: float, fiber_length: float) -> float:
    """K bounding the normalized fiber-growth ratio, from the quasi-isometry
    constant Q and delta = sup||H - Id||: the image fiber's endpoints move by
    at most 2*delta under H, and arclength is within Q of endpoint distance."""
    ell = fiber_length
    if 4.0 * displacement_sup >= ell:
        raise ValueError("fiber too short for the displacement bound")
    return Q * (ell + 4.0 * displacement_sup) / (ell - 4.0 * displacement_sup)


# ---------------------------------------------------------------------------
# weighted leaf measures and pushforwards


@dataclass
class WeightedLeafMeasure:
    segment: LeafSegment
    positions: np.ndarray   # arclength coordinates on segment
    weights: np.ndarray     # nonnegative
    mass: float

    def __post_init__(self):
        assert np.all(self.weights >= 0.0)
        assert abs(float(np.sum(self.weights)) - self.mass) <= 1e-9 * max(self.mass, 1.0)

    @classmethod
    def uniform(cls, segment: LeafSegment, n: int) -> "WeightedLeafMeasure":
        """Particle approximation of normalized arclength on the segment."""
        pos = (np.arange(n) + 0.5) * segment.length / n
        w = np.full(n, 1.0 / n)
        return cls(segment=segment, positions=pos, weights=w, mass=1.0)

    def density_table(self, bins: int = 16):
        """(density, stderr, edges) of the measure vs normalized arclength."""
        lam_hat = self.positions / self.segment.length
        edges = np.linspace(0.0, 1.0, bins + 1)
        hist = np.histogram(np.clip(lam_hat, 0.0, 1.0), bins=edges,
                            weights=self.weights)[0]
        p = hist / self.mass
        dens = p * bins
        n_eff = float(np.sum(self.weights)) ** 2 / float(np.sum(self.weights ** 2))
        se = bins * np.sqrt(np.maximum(p * (1.0 - p), 0.0) / n_eff)
        return dens, se, edges


def _eigen_arclength(f: ToralEndomorphism, verts: np.ndarray,
                     cum: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Arclength of points lying on an unstable polyline, by the monotone
    unstable eigen-coordinate (exact for straight leaves)."""
    _, _, _, basis_inv = f.eigen_data()
    c_verts = verts @ basis_inv[0]
    c_pts = pts @ basis_inv[0]
    if c_verts[-1] < c_verts[0]:
        return np.interp(c_pts, c_verts[::-1], cum[::-1])
    return np.interp(c_pts, c_verts, cum)


def pushforward_leaf_measure(f: ToralEndomorphism, mu: WeightedLeafMeasure,
                             k: int, alpha: float) -> WeightedLeafMeasure:
    """The measure alpha^k F^k_* mu as particles on the image segment."""
    f.require_anosov()
    pts = mu.segment.point_at(mu.positions)
    verts = mu.segment.vertices
    h_target = mu.segment.h_max
    for _ in range(k):
        pts = f.eval_lift(pts)
        verts = _push_polyline(f, verts, h_target)
    cum = _cum_arclength(verts)
    pos = _eigen_arclength(f, verts, cum, pts)
    base = mu.segment.base_point
    for _ in range(k):
        base = f.eval_lift(base)
    base_idx = int(np.argmin(np.linalg.norm(verts - base, axis=-1)))
    seg = LeafSegment(flavor="unstable", vertices=verts, cum_arclength=cum,
                      base_index=base_idx,
                      h_max=float(np.max(np.linalg.norm(np.diff(verts, axis=0),
                                                        axis=-1))))
    scale = float(alpha) ** k
    return WeightedLeafMeasure(segment=seg, positions=pos,
                               weights=mu.weights * scale,
                               mass=mu.mass * scale)


@dataclass
class QuasiPreservationReport:
    min_ratio: float
    max_ratio: float
    densities: np.ndarray
    stderr: np.ndarray
    k: int


def quasi_preservation_ratio(f: ToralEndomorphism, seg: LeafSegment, k: int,
                             n_particles: int = 20_000,
                             bins: int = 16) -> QuasiPreservationReport:
    """Extremes of d(normalized arclength) / d(F^k-pushed normalized arclength).

    Both measures live on the image segment F^k(seg); the pushed measure is
    approximated by particles started uniform-in-arclength on seg.
    """
    mu0 = WeightedLeafMeasure.uniform(seg, n_particles)
    eta = pushforward_leaf_measure(f, mu0, k, alpha=1.0)
    dens, se, _ = eta.density_table(bins)
    occupied = dens > 0.0
    if not np.all(occupied):
        raise NonConvergence("pushed particles leave empty bins; raise n_particles")
    ratio = 1.0 / dens
    return QuasiPreservationReport(min_ratio=float(np.min(ratio)),
                                   max_ratio=float(np.max(ratio)),
                                   densities=dens, stderr=se, k=k)


@dataclass
class TransportReport:
    density: np.ndarray
    stderr: np.ndarray
    bin_edges: np.ndarray
    scaling_residual: float
    fraction_inside: float


def holonomy_transport_check(f: ToralEndomorphism, mu: WeightedLeafMeasure,
                             dst: LeafSegment, bins: int = 16,
                             alpha: Optional[float] = None) -> TransportReport:
    """Transport mu to dst along stable leaves and test F-equivariance.

    The scaling residual compares (push one step, then transport) against
    (transport, then push one step) as binned densities on the common image
    segment; holonomy invariance under F makes the two measures equal.
    """
    if alpha is None:
        alpha = abs(f.eigen_data()[0])
    src_pts = mu.segment.point_at(mu.positions)
    coords, inside = holonomy_coordinates(f, dst, src_pts)
    if not np.any(inside):
        raise NoIntersection("no stable leaf through mu's support crosses dst")
    transported = WeightedLeafMeasure(
        segment=dst, positions=coords[inside], weights=mu.weights[inside],
        mass=float(np.sum(mu.weights[inside])))
    dens, se, edges = transported.density_table(bins)
    # equivariance at one step
    a = pushforward_leaf_measure(f, transported, 1, alpha)
    mu1 = pushforward_leaf_measure(f, mu, 1, alpha)
    pts1 = mu1.segment.point_at(mu1.positions)
    coords_b, inside_b = holonomy_coordinates(f, a.segment, pts1)
    b = WeightedLeafMeasure(segment=a.segment, positions=coords_b[inside_b],
                            weights=mu1.weights[inside_b],
                            mass=float(np.sum(mu1.weights[inside_b])))
    dens_a, _, _ = a.density_table(bins)
    dens_b, _, _ = b.density_table(bins)
    residual = float(np.max(np.abs(dens_a - dens_b)))
    return TransportReport(density=dens, stderr=se, bin_edges=edges,
                           scaling_residual=residual,
                           fraction_inside=float(np.mean(inside)))


# ---------------------------------------------------------------------------
# aggregate verdict


@dataclass
class TheoremBReport:
    constant_jacobian: Optional[float]
    exponent_spread: float
    lam_u_birkhoff: float
    lam_s_birkhoff: float
    birkhoff_stderr: float
    alpha_log: float
    ubd: Optional[UbdReport]
    verdicts: list
    summary: str


def theoremB_verdict(f: ToralEndomorphism, max_period: int = 3,
                     birkhoff_N: int = 100_000,
                     ubd_report: Optional[UbdReport] = None,
                     seed: int = 0) -> TheoremBReport:
    """Cross-check rigidity implications against measured quantities.

    Uniformly bounded conditional densities plus constant Jacobian force the
    Lyapunov exponents to match the linearization's; a positive periodic
    spread must come with a degrading UBD estimate.
    """
    rng = np.random.default_rng(seed)
    cj = f.constant_jacobian
    rep = specialness_diagnostic(f, max_period)
    bu = birkhoff_exponent(f, rng.uniform(size=2), birkhoff_N)
    bs = birkhoff_exponent(f, rng.uniform(size=2), birkhoff_N, flavor="stable")
    alpha_log = math.log(abs(f.eigen_data()[0]))
    verdicts = []
    spread_positive = rep.spread > 1e-9
    exponents_match = abs(bu.value - alpha_log) < 1e-3
    if cj is not None:
        verdicts.append("constant Jacobian: exponent sum fixed at "
                        f"{math.log(abs(f.linear.det)):.6f}")
    if not spread_positive:
        verdicts.append("periodic exponents constant: consistent with special")
    else:
        verdicts.append(f"periodic exponent spread {rep.spread:.3e}: non-special")
    if ubd_report is not None:
        verdicts.append(f"UBD estimate C = {ubd_report.C_estimate:.3f} "
                        f"({ubd_report.flag})")
        if ubd_report.flag == "UBD-consistent" and cj is not None:
            if exponents_match:
                verdicts.append("UBD + constant Jacobian and exponents match "
                                "the linearization: consistent")
                summary = "consistent"
            else:
                verdicts.append("UBD + constant Jacobian but exponents differ: "
                                "inconsistent with rigidity")
                summary = "inconsistent"
        elif ubd_report.flag == "UBD-violating trend" and spread_positive:
            verdicts.append("exponent spread with degrading density bounds: "
                            "contrapositive-consistent")
            summary = "contrapositive-consistent"
        else:
            summary = "inconclusive"
    else:
        summary = "consistent" if (not spread_positive and exponents_match) \
            else ("contrapositive-consistent" if spread_positive else "inconclusive")
    return TheoremBReport(constant_jacobian=cj, exponent_spread=rep.spread,
                          lam_u_birkhoff=bu.value, lam_s_birkhoff=bs.value,
                          birkhoff_stderr=bu.stderr, alpha_log=alpha_log,
                          ubd=ubd_report, verdicts=verdicts, summary=summary)
