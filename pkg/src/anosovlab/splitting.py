"""Stable and unstable direction fields, leaf segments, and holonomies.

Directions are computed by cone iteration on the lift: the unstable direction
at x is the limit of DF^n(F^{-n} x) v_u, the stable direction the limit of
DF^{-n}(F^n x) v_s.  Leaf segments are grown by the push-forward method: seed
a short straight segment deep in the past (unstable) or future (stable),
apply the dynamics, and resample; transversal seeding errors are contracted
geometrically, so the vertices converge onto the true leaf.

Orbits are kept numerically tame: forward orbits are reduced mod Z^2
(derivatives are Z^2-periodic), and stable-leaf growth inverts the lift with
per-vertex guesses chained along a reduced orbit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import NoIntersection, NonConvergence, NotOnSameLeaf
from .torus_map import ToralEndomorphism, reduce_mod1, solve2

DIRECTION_TOL = 1e-10
DIRECTION_DEPTH_CAP = 60


@dataclass
class DirectionSample:
    """Unit direction(s) of the invariant splitting at base point(s)."""

    base: np.ndarray       # (..., 2)
    direction: np.ndarray  # (..., 2), unit vectors
    flavor: str            # "stable" | "unstable"
    iterations: int
    angular_error: float


@dataclass
class LeafSegment:
    """Arclength-parametrized polyline approximating a leaf piece of the lift."""

    flavor: str
    vertices: np.ndarray        # (N, 2)
    cum_arclength: np.ndarray   # (N,), starting at 0
    base_index: int
    h_max: float

    @property
    def length(self) -> float:
        return float(self.cum_arclength[-1])

    @property
    def base_point(self) -> np.ndarray:
        return self.vertices[self.base_index]

    @property
    def base_arclength(self) -> float:
        return float(self.cum_arclength[self.base_index])

    def point_at(self, s) -> np.ndarray:
        """Point(s) at arclength s by linear interpolation."""
        s = np.asarray(s, dtype=float)
        x = np.interp(s, self.cum_arclength, self.vertices[:, 0])
        y = np.interp(s, self.cum_arclength, self.vertices[:, 1])
        return np.stack([x, y], axis=-1)

    def tangent_at(self, s) -> np.ndarray:
        """Unit chord tangent(s) at arclength s."""
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.cum_arclength, s, side="right") - 1,
                      0, len(self.vertices) - 2)
        chord = self.vertices[idx + 1] - self.vertices[idx]
        return chord / np.linalg.norm(chord, axis=-1, keepdims=True)

    def locate(self, point: np.ndarray, dist_tol: Optional[float] = None) -> float:
        """Arclength of the closest polyline point; NotOnSameLeaf beyond tolerance.

        The default tolerance is the resampling error scale ~ h_max.
        """
        point = np.asarray(point, dtype=float)
        a = self.vertices[:-1]
        chord = self.vertices[1:] - a
        clen2 = np.sum(chord * chord, axis=-1)
        t = np.clip(np.sum((point - a) * chord, axis=-1) / clen2, 0.0, 1.0)
        proj = a + t[:, None] * chord
        d2 = np.sum((proj - point) ** 2, axis=-1)
        i = int(np.argmin(d2))
        dist = math.sqrt(float(d2[i]))
        tol = self.h_max if dist_tol is None else dist_tol
        if dist > tol:
            raise NotOnSameLeaf(
                f"point at distance {dist:.3e} from the segment (tol {tol:.1e})"
            )
        seg_len = self.cum_arclength[i + 1] - self.cum_arclength[i]
        return float(self.cum_arclength[i] + t[i] * seg_len)

    def to_csv(self, path):
        """Write vertices with arclength for plotting."""
        data = np.column_stack([self.cum_arclength, self.vertices])
        header = "arclength,x1,x2"
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def _cum_arclength(vertices: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(vertices, axis=0), axis=-1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _resample(vertices: np.ndarray, s_values: np.ndarray) -> np.ndarray:
    cum = _cum_arclength(vertices)
    x = np.interp(s_values, cum, vertices[:, 0])
    y = np.interp(s_values, cum, vertices[:, 1])
    return np.stack([x, y], axis=-1)


# ---------------------------------------------------------------------------
# direction fields


def _normalize_sign(direction: np.ndarray, reference: np.ndarray) -> np.ndarray:
    sign = np.sign(np.sum(direction * reference, axis=-1, keepdims=True))
    sign = np.where(sign == 0.0, 1.0, sign)
    return direction * sign


def unstable_direction(f: ToralEndomorphism, x, tol: float = DIRECTION_TOL,
                       max_depth: int = DIRECTION_DEPTH_CAP) -> DirectionSample:
    """Unstable direction(s) at x (batched), by backward-orbit cone iteration."""
    f.require_anosov()
    lam_u, lam_s, basis, basis_inv = f.eigen_data()
    v_u = basis[:, 0]
    x = np.asarray(x, dtype=float)
    z = x.copy()
    # cumulative cocycle DF^n(F^{-n} x) = DF(x_{-1}) ... DF(x_{-n}); factors
    # append on the right as the orbit deepens
    mat = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
    prev = np.broadcast_to(v_u, x.shape).copy()
    err = math.inf
    for n in range(1, max_depth + 1):
        z = f.invert_lift(z)
        mat = mat @ f.derivative(reduce_mod1(z))
        d = (mat @ v_u[:, None])[..., 0]
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        d = _normalize_sign(d, prev)
        err = float(np.max(np.linalg.norm(d - prev, axis=-1)))
        prev = d
        if err < tol:
            break
    d = _normalize_sign(prev, v_u)
    return DirectionSample(base=x, direction=d, flavor="unstable",
                           iterations=n, angular_error=err)


def stable_direction(f: ToralEndomorphism, x, tol: float = DIRECTION_TOL,
                     max_depth: int = DIRECTION_DEPTH_CAP) -> DirectionSample:
    """Stable direction(s) at x (batched), by forward-orbit cone iteration.

    The forward orbit is reduced mod Z^2: the stable field is Z^2-periodic and
    DF only depends on the reduced point.
    """
    f.require_anosov()
    lam_u, lam_s, basis, basis_inv = f.eigen_data()
    v_s = basis[:, 1]
    x = np.asarray(x, dtype=float)
    z = reduce_mod1(x)
    # DF^{-n}(F^n x) = DF(x)^{-1} DF(x_1)^{-1} ... DF(x_{n-1})^{-1}
    mat = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
    prev = np.broadcast_to(v_s, x.shape).copy()
    err = math.inf
    for n in range(1, max_depth + 1):
        dstep = f.derivative(z)
        # right-multiply by DF(x_{n-1})^{-1}: solve mat_new^T column-wise
        inv = np.linalg.inv(dstep) if dstep.ndim == 2 else _inv2(dstep)
        mat = mat @ inv
        z = reduce_mod1(f.eval_lift(z))
        d = (mat @ v_s[:, None])[..., 0]
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        d = _normalize_sign(d, prev)
        err = float(np.max(np.linalg.norm(d - prev, axis=-1)))
        prev = d
        if err < tol:
            break
    d = _normalize_sign(prev, v_s)
    return DirectionSample(base=x, direction=d, flavor="stable",
                           iterations=n, angular_error=err)


def _inv2(mat: np.ndarray) -> np.ndarray:
    det = mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]
    out = np.empty_like(mat)
    out[..., 0, 0] = mat[..., 1, 1] / det
    out[..., 0, 1] = -mat[..., 0, 1] / det
    out[..., 1, 0] = -mat[..., 1, 0] / det
    out[..., 1, 1] = mat[..., 0, 0] / det
    return out


def splitting_directions(f: ToralEndomorphism, x, tol: float = DIRECTION_TOL):
    """Convenience: (unstable, stable) DirectionSamples at x."""
    return unstable_direction(f, x, tol), stable_direction(f, x, tol)


# ---------------------------------------------------------------------------
# leaf growth


def _growth_rate(f: ToralEndomorphism, flavor: str) -> float:
    """Certified one-step growth lower bound along the flavor direction."""
    cert = f.certificate
    if cert is not None:
        return cert.mu_u if flavor == "unstable" else 1.0 / cert.mu_s
    lam_u, lam_s, _, _ = f.eigen_data()
    # fall back to eigenvalue moduli with a margin
    return 0.7 * abs(lam_u) if flavor == "unstable" else 0.7 / abs(lam_s)


def grow_leaf_segment(f: ToralEndomorphism, x, flavor: str, halflength: float,
                      h_max: float = 1e-3, seed_halflength: float = 5e-3,
                      safety: float = 1.25) -> LeafSegment:
    """Leaf segment of arclength >= 2*halflength through x, vertex spacing <= h_max."""
    if flavor not in ("stable", "unstable"):
        raise ValueError(f"unknown flavor {flavor!r}")
    f.require_anosov()
    x = np.asarray(x, dtype=float)
    mu = _growth_rate(f, flavor)
    seed_half = min(seed_halflength, halflength)
    target_half = halflength * safety
    depth = max(1, math.ceil(math.log(target_half / seed_half) / math.log(mu)))
    n_final = int(math.ceil(2.0 * target_half / h_max)) + 1

    if flavor == "unstable":
        # backward orbit on the cover (F is invertible there)
        orbit = [x]
        for _ in range(depth):
            orbit.append(f.invert_lift(orbit[-1]))
        seed_dir = unstable_direction(f, orbit[-1]).direction
        offsets = np.linspace(-seed_half, seed_half, n_final)[:, None] * seed_dir
        verts = orbit[-1] + offsets
        shift = np.zeros(2)
        for k in range(depth, 0, -1):
            verts = f.eval_lift(verts)
            base = orbit[k - 1]
            window = max(target_half * mu ** (-(k - 1)), 2 * h_max)
            verts = _trim_resample(verts, base, window, n_final)
        base = x
    else:
        # reduced forward orbit with translation words for guess chaining
        x0 = reduce_mod1(x)
        shift = x - x0
        orbit = [x0]
        words = []
        for _ in range(depth):
            image = f.eval_lift(orbit[-1])
            nxt = reduce_mod1(image)
            words.append(image - nxt)
            orbit.append(nxt)
        seed_dir = stable_direction(f, orbit[-1]).direction
        offsets = np.linspace(-seed_half, seed_half, n_final)[:, None] * seed_dir
        verts = orbit[-1] + offsets
        linv = np.linalg.inv(f.linear.array)
        for k in range(depth, 0, -1):
            base = orbit[k - 1]
            guess = base + (verts - orbit[k]) @ linv.T
            verts = f.invert_lift(verts + words[k - 1], guess=guess)
            window = max(target_half * mu ** (-(k - 1)), 2 * h_max)
            verts = _trim_resample(verts, base, window, n_final)
        base = x0

    # final uniform resample centred on the base point, base as an exact vertex
    cum = _cum_arclength(verts)
    s_base = _project_arclength(verts, cum, base)
    n_side = int(math.ceil(halflength / h_max))
    h = halflength / n_side
    grid = s_base + h * np.arange(-n_side, n_side + 1)
    if grid[0] < 0.0 or grid[-1] > cum[-1]:
        raise NonConvergence(
            "leaf growth produced a segment shorter than requested"
        )
    out = _resample(verts, grid)
    out[n_side] = base
    return LeafSegment(flavor=flavor, vertices=out + shift,
                       cum_arclength=_cum_arclength(out),
                       base_index=n_side, h_max=h_max)


def _trim_resample(verts: np.ndarray, base: np.ndarray, window: float,
                   n_final: int) -> np.ndarray:
    cum = _cum_arclength(verts)
    s_base = _project_arclength(verts, cum, base)
    lo = max(0.0, s_base - window)
    hi = min(float(cum[-1]), s_base + window)
    grid = np.linspace(lo, hi, n_final)
    return _resample(verts, grid)


def _project_arclength(verts: np.ndarray, cum: np.ndarray, point: np.ndarray) -> float:
    a = verts[:-1]
    chord = verts[1:] - a
    clen2 = np.maximum(np.sum(chord * chord, axis=-1), 1e-300)
    t = np.clip(np.sum((point - a) * chord, axis=-1) / clen2, 0.0, 1.0)
    proj = a + t[:, None] * chord
    d2 = np.sum((proj - point) ** 2, axis=-1)
    i = int(np.argmin(d2))
    return float(cum[i] + t[i] * (cum[i + 1] - cum[i]))


# ---------------------------------------------------------------------------
# holonomy


def stable_holonomy(f: ToralEndomorphism, src: LeafSegment, dst: LeafSegment,
                    q: np.ndarray, amplification: float = 1e7) -> np.ndarray:
    """Point where the stable leaf through q (on src) crosses dst.

    Instead of growing a stable segment, the crossing is located by forward
    amplification: after K steps the separation between F^K(dst(t)) and
    F^K(q) is dominated by its unstable eigen-coordinate, which changes sign
    exactly where dst crosses W^s(q).  Both orbits are translated by the same
    deck element each step, which keeps coordinates bounded and differences
    exact.
    """
    f.require_anosov()
    q = np.asarray(q, dtype=float)
    src.locate(q)  # validates the precondition that q lies on src
    lam_u, lam_s, basis, basis_inv = f.eigen_data()
    mu = _growth_rate(f, "unstable")
    steps = min(30, max(5, math.ceil(math.log(amplification) / math.log(mu))))

    def separation_coord(points: np.ndarray) -> np.ndarray:
        a = q.copy()
        b = points.copy()
        for _ in range(steps):
            a = f.eval_lift(a)
            b = f.eval_lift(b)
            m = np.floor(a)
            a = a - m
            b = b - m
        return (b - a) @ basis_inv[0]

    svals = dst.cum_arclength
    g = separation_coord(dst.vertices)
    sign_change = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) <= 0.0)[0]
    if len(sign_change) == 0:
        raise NoIntersection(
            "the stable leaf through q does not cross the target segment"
        )
    # closest bracket to q when several vertices straddle the crossing
    mids = 0.5 * (dst.vertices[sign_change] + dst.vertices[sign_change + 1])
    i = int(sign_change[np.argmin(np.linalg.norm(mids - q, axis=-1))])
    if g[i] == 0.0:
        return dst.vertices[i].copy()
    if g[i + 1] == 0.0:
        return dst.vertices[i + 1].copy()

    def g_scalar(s):
        return float(separation_coord(dst.point_at(s)))

    s_root = brentq(g_scalar, float(svals[i]), float(svals[i + 1]),
                    xtol=1e-14, rtol=1e-15)
    return dst.point_at(s_root)


# ---------------------------------------------------------------------------
# quasi-isometry and distribution regularity


def quasi_isometry_constant(f: ToralEndomorphism, flavor: str,
                            n_samples: int = 4,
                            lengths: Sequence[float] = (0.5, 1.0, 2.0),
                            h_max: float = 2e-3,
                            seed: int = 0) -> dict:
    """Max of leafwise distance over Euclidean distance, per segment half-length."""
    rng = np.random.default_rng(seed)
    bases = rng.uniform(size=(n_samples, 2))
    out = {}
    for ell in sorted(lengths):
        worst = 0.0
        for b in bases:
            seg = grow_leaf_segment(f, b, flavor, halflength=ell, h_max=h_max)
            idx = np.linspace(0, len(seg.vertices) - 1, 96).astype(int)
            pts = seg.vertices[idx]
            arcs = seg.cum_arclength[idx]
            darc = np.abs(arcs[:, None] - arcs[None, :])
            deuc = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            mask = deuc > 1e-9
            worst = max(worst, float(np.max(darc[mask] / deuc[mask])))
        out[float(ell)] = worst
    return out


def distribution_modulus(f: ToralEndomorphism, flavor: str,
                         scales: Sequence[float],
                         n_samples: int = 100, seed: int = 0,
                         tol: float = 1e-11):
    """Max angle difference of the direction field over pairs at each scale.

    Returns (table, slope): table is a list of (scale, max angle difference),
    slope the log-log least-squares fit.  A slope near 1 is consistent with a
    differentiable direction field.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(size=(n_samples, 2))
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n_samples)
    u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    direction_fn = unstable_direction if flavor == "unstable" else stable_direction
    table = []
    for delta in sorted(scales, reverse=True):
        d0 = direction_fn(f, base, tol=tol).direction
        d1 = direction_fn(f, base + delta * u, tol=tol).direction
        # line angle difference (directions defined up to sign)
        cross = np.abs(d0[:, 0] * d1[:, 1] - d0[:, 1] * d1[:, 0])
        ang = np.arcsin(np.clip(cross, 0.0, 1.0))
        table.append((float(delta), float(np.max(ang))))
    usable = [(d, a) for d, a in table if a > 0.0]
    if len(usable) >= 2:
        logs = np.log([d for d, _ in usable])
        loga = np.log([a for _, a in usable])
        slope = float(np.polyfit(logs, loga, 1)[0])
    else:
        slope = math.nan
    return table, slope
