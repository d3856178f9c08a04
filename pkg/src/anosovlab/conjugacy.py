"""The conjugacy H on the universal cover: A o H = H o F with H - Id bounded.

H = Id + u is evaluated on demand by truncated geometric series in the
eigenbasis of the linearization: write q(x) = F(x) - Lx (Z^2-periodic) and
decompose along the eigendirections; then

    u_u(x) =  sum_{k>=0} lam_u^{-(k+1)} q_u(F^k x)
    u_s(x) = -sum_{k>=1} lam_s^{k-1}  q_s(F^{-k} x)

with truncation depths fixed a priori from the geometric tails.  Forward
orbits are reduced mod Z^2 (q is periodic and forward orbits of equivalent
points stay equivalent); backward orbits must stay on the cover, but the
series weights cancel the orbit growth exactly, so double precision holds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InsufficientScaleRange, NonConvergence
from .splitting import LeafSegment
from .torus_map import ToralEndomorphism, reduce_mod1


@dataclass
class RegularityReport:
    """Scale-by-scale distortion of H along a leaf and the fitted exponent."""

    scales: list
    max_distortion: list
    mean_distortion: list
    holder_exponent: float
    residual: float
    local_slopes: list
    leaf_base: tuple

    def to_json(self) -> str:
        return json.dumps({
            "scales": self.scales,
            "max_distortion": self.max_distortion,
            "mean_distortion": self.mean_distortion,
            "holder_exponent": self.holder_exponent,
            "residual": self.residual,
            "local_slopes": self.local_slopes,
            "leaf_base": list(self.leaf_base),
        })


class ConjugacyField:
    """On-demand evaluator of H = Id + u with A o H = H o F on the cover."""

    def __init__(self, f: ToralEndomorphism, tol: float = 1e-8):
        f.require_anosov()
        self.f = f
        self.tol = float(tol)
        lam_u, lam_s, basis, basis_inv = f.eigen_data()
        self.lam_u = lam_u
        self.lam_s = lam_s
        self.basis = basis
        self.basis_inv = basis_inv
        self.linear = f.linear.array
        # sup of q in eigen-coordinates, from the coefficient bound
        q_sup = f.perturbation_sup_bound()
        self.q_sup_eig = q_sup * float(np.linalg.norm(basis_inv, 2))
        if self.q_sup_eig == 0.0:
            self.n_fwd = 0
            self.n_bwd = 0
        else:
            au = abs(lam_u)
            as_ = abs(lam_s)
            self.n_fwd = max(1, math.ceil(
                math.log(self.q_sup_eig / (tol * (au - 1.0))) / math.log(au)))
            self.n_bwd = max(1, math.ceil(
                math.log(self.q_sup_eig / (tol * (1.0 - as_))) / math.log(1.0 / as_)))

    # -- core evaluation -----------------------------------------------------

    def q_eig(self, x: np.ndarray) -> np.ndarray:
        """q(x) = F(x) - Lx in eigen-coordinates (Z^2-periodic)."""
        x = reduce_mod1(np.asarray(x, dtype=float))
        q = self.f.eval_lift(x) - x @ self.linear.T
        return q @ self.basis_inv.T

    def displacement(self, x: np.ndarray) -> np.ndarray:
        """u(x) = H(x) - x, batched."""
        x = np.asarray(x, dtype=float)
        u_eig = np.zeros(x.shape)
        if self.q_sup_eig > 0.0:
            # unstable component: forward orbit, reduced mod Z^2
            z = reduce_mod1(x)
            w = 1.0 / self.lam_u
            for _ in range(self.n_fwd):
                u_eig[..., 0] += w * self.q_eig(z)[..., 0]
                z = reduce_mod1(self.f.eval_lift(z))
                w /= self.lam_u
            # stable component: true backward orbit on the cover
            z = x.copy()
            w = 1.0
            for _ in range(self.n_bwd):
                z = self.f.invert_lift(z)
                u_eig[..., 1] -= w * self.q_eig(z)[..., 1]
                w *= self.lam_s
        return u_eig @ self.basis.T

    def eval(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.displacement(x)

    def eval_inverse(self, y: np.ndarray, max_iter: int = 60,
                     fd_spacing: float = 1e-5) -> np.ndarray:
        """Solve H(x) = y by damped Newton from guess y.

        The Jacobian is estimated by central finite differences at a spacing
        coarse enough to smooth sub-scale roughness of H.
        """
        y = np.asarray(y, dtype=float)
        x = y.copy()
        err = math.inf
        for it in range(max_iter):
            res = self.eval(x) - y
            err = float(np.max(np.linalg.norm(res, axis=-1)))
            if err < 10.0 * self.tol:
                return x
            # spacing tracks the residual so the secant stays local once H's
            # sub-scale roughness starts to matter
            spacing = max(1e-9, min(fd_spacing, err))
            jac = np.empty(x.shape + (2,))
            for j in range(2):
                e = np.zeros(2)
                e[j] = spacing
                jac[..., j] = (self.eval(x + e) - self.eval(x - e)) / (2 * spacing)
            step = np.linalg.solve(jac, res[..., None])[..., 0]
            nstep = np.linalg.norm(step, axis=-1, keepdims=True)
            step = np.where(nstep > 0.25, step * (0.25 / np.maximum(nstep, 1e-300)), step)
            if it >= 20:
                step = 0.5 * step
            x = x - step
        raise NonConvergence(
            f"H-inversion stalled at residual {err:.3e} (target {10 * self.tol:.1e})"
        )

    def residual(self, x: np.ndarray) -> np.ndarray:
        """||A(H(x)) - H(F(x))|| pointwise (defining-equation defect)."""
        x = np.asarray(x, dtype=float)
        lhs = self.eval(x) @ self.linear.T
        rhs = self.eval(self.f.eval_lift(x))
        return np.linalg.norm(lhs - rhs, axis=-1)

    def sup_displacement_bound(self) -> float:
        """A priori geometric-series bound on sup ||H - Id||."""
        au = abs(self.lam_u)
        as_ = abs(self.lam_s)
        bound_eig = self.q_sup_eig * (1.0 / (au - 1.0) + 1.0 / (1.0 - as_))
        return bound_eig * float(np.linalg.norm(self.basis, 2))


def build_conjugacy(f: ToralEndomorphism, tol: float = 1e-8) -> ConjugacyField:
    return ConjugacyField(f, tol=tol)


def eval_H(H: ConjugacyField, x) -> np.ndarray:
    return H.eval(x)


def eval_H_inverse(H: ConjugacyField, y) -> np.ndarray:
    return H.eval_inverse(y)


# ---------------------------------------------------------------------------
# leaf-level diagnostics


def leaf_image_check(H: ConjugacyField, seg: LeafSegment) -> float:
    """Max distance from H(vertices) to the eigenline through H(base)."""
    image = H.eval(seg.vertices)
    base = H.eval(seg.base_point)
    col = 0 if seg.flavor == "unstable" else 1
    d = H.basis[:, col]
    rel = image - base
    return float(np.max(np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0])))


def estimate_holder_along_leaf(H: ConjugacyField, seg: LeafSegment,
                               scales: Sequence[float], n_pairs: int = 24,
                               seed: int = 0,
                               metric_src: Optional[Callable] = None,
                               metric_dst: Optional[Callable] = None) -> RegularityReport:
    """Log-log regression of image distance vs leaf distance at each scale.

    Pairs are sampled at arclength separation = scale along the segment; the
    source distance is arclength (or a supplied leafwise metric), the image
    distance Euclidean (the image leaf of A is a straight line) or a supplied
    metric.
    """
    usable = [s for s in sorted(scales, reverse=True) if 0.0 < s < 0.5 * seg.length]
    if len(usable) < 4:
        raise InsufficientScaleRange(
            f"only {len(usable)} usable scales; at least 4 required"
        )
    rng = np.random.default_rng(seed)
    log_scale = []
    log_dist = []
    max_dist = []
    mean_dist = []
    for s in usable:
        lo = rng.uniform(0.0, seg.length - s, size=n_pairs)
        x = seg.point_at(lo)
        z = seg.point_at(lo + s)
        d_src = (metric_src(x, z) if metric_src is not None
                 else np.full(n_pairs, s))
        hx = H.eval(x)
        hz = H.eval(z)
        d_dst = (metric_dst(hx, hz) if metric_dst is not None
                 else np.linalg.norm(hx - hz, axis=-1))
        ratio = d_dst / d_src
        max_dist.append(float(np.max(ratio)))
        mean_dist.append(float(np.mean(ratio)))
        log_scale.append(math.log(s))
        log_dist.append(float(np.mean(np.log(d_dst))))
    coeffs, res = np.polyfit(log_scale, log_dist, 1, full=True)[:2]
    slope = float(coeffs[0])
    residual = float(res[0]) if len(res) else 0.0
    local = [
        (log_dist[i + 1] - log_dist[i]) / (log_scale[i + 1] - log_scale[i])
        for i in range(len(usable) - 1)
    ]
    return RegularityReport(
        scales=[float(s) for s in usable],
        max_distortion=max_dist,
        mean_distortion=mean_dist,
        holder_exponent=slope,
        residual=residual,
        local_slopes=[float(v) for v in local],
        leaf_base=tuple(float(v) for v in seg.base_point),
    )


def u_derivative_of_H(H: ConjugacyField, seg: LeafSegment, x, spacing: float = 1e-3,
                      metric_src: Optional[Callable] = None,
                      metric_dst: Optional[Callable] = None) -> float:
    """Leafwise derivative of H at x: limit of image distance over leaf distance.

    Finite-difference ratio at two spacings (h and h/2) combined by Richardson
    extrapolation.  x must lie on seg.
    """
    x = np.asarray(x, dtype=float)
    s0 = seg.locate(x)
    hx = H.eval(x)

    def ratio(h: float) -> float:
        z = seg.point_at(s0 + h)
        d_src = (float(metric_src(x, z)) if metric_src is not None else h)
        hz = H.eval(z)
        d_dst = (float(metric_dst(hx, hz)) if metric_dst is not None
                 else float(np.linalg.norm(hz - hx)))
        return d_dst / d_src

    r1 = ratio(spacing)
    r2 = ratio(spacing / 2.0)
    return 2.0 * r2 - r1
