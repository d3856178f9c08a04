"""Periodic orbits, their Lyapunov exponents, and periodic-data obstructions.

Seeds are the exact rational periodic points of the linearization, found by
integer linear algebra; orbits of a perturbed map are obtained by multi-point
shooting continued along the amplitude homotopy, with the integer translation
words frozen from the seed.  Exponents are the log-moduli of the eigenvalues
of the derivative cocycle around the orbit, divided by the period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ComplexEigenvalues,
    NonConvergence,
    OrbitMatchFailed,
    PeriodCollapse,
)
from .splitting import stable_direction, unstable_direction
from .torus_map import IntMatrix2, ToralEndomorphism, reduce_mod1, torus_distance

ORBIT_RESIDUAL_TOL = 1e-11
COLLAPSE_TOL = 1e-8


# ---------------------------------------------------------------------------
# exact periodic points of the linearization


def _int_matrix_power(L: IntMatrix2, n: int):
    m = [[1, 0], [0, 1]]
    e = [list(row) for row in L.entries]
    for _ in range(n):
        m = [
            [m[0][0] * e[0][0] + m[0][1] * e[1][0], m[0][0] * e[0][1] + m[0][1] * e[1][1]],
            [m[1][0] * e[0][0] + m[1][1] * e[1][0], m[1][0] * e[0][1] + m[1][1] * e[1][1]],
        ]
    return m


def periodic_points_linear(L: IntMatrix2, n: int):
    """All fixed points of L^n on the torus, as exact Fractions in [0,1)^2.

    Solves (L^n - I) x in Z^2; the count equals |det(L^n - I)|.
    """
    p = _int_matrix_power(L, n)
    m = [[p[0][0] - 1, p[0][1]], [p[1][0], p[1][1] - 1]]
    det = m[0][0] * m[1][1] - m[0][1] * m[1][0]
    if det == 0:
        raise ValueError(f"L^{n} - I is singular; the matrix is not hyperbolic")
    # x = M^{-1} k for integer k inside M [0,1)^2: scan the corner bounding box
    corners = [
        (0, 0),
        (m[0][0], m[1][0]),
        (m[0][1], m[1][1]),
        (m[0][0] + m[0][1], m[1][0] + m[1][1]),
    ]
    k1_lo = min(c[0] for c in corners)
    k1_hi = max(c[0] for c in corners)
    k2_lo = min(c[1] for c in corners)
    k2_hi = max(c[1] for c in corners)
    points = []
    for k1 in range(k1_lo, k1_hi + 1):
        for k2 in range(k2_lo, k2_hi + 1):
            x1 = Fraction(m[1][1] * k1 - m[0][1] * k2, det)
            x2 = Fraction(-m[1][0] * k1 + m[0][0] * k2, det)
            if 0 <= x1 < 1 and 0 <= x2 < 1:
                points.append((x1, x2))
    assert len(points) == abs(det)
    return points


def periodic_orbits_linear(L: IntMatrix2, n: int):
    """Orbits of exact minimal period n of the linearization, as rational tuples."""
    fixed = set(periodic_points_linear(L, n))
    lower = set()
    for d in range(1, n):
        if n % d == 0:
            lower |= set(periodic_points_linear(L, d))
    fresh = fixed - lower
    orbits = []
    seen = set()
    e = L.entries
    for pt in sorted(fresh):
        if pt in seen:
            continue
        orbit = []
        x = pt
        for _ in range(n):
            orbit.append(x)
            seen.add(x)
            x = (
                (e[0][0] * x[0] + e[0][1] * x[1]) % 1,
                (e[1][0] * x[0] + e[1][1] * x[1]) % 1,
            )
        orbits.append(orbit)
    return orbits


# ---------------------------------------------------------------------------
# orbits of the nonlinear map


@dataclass
class PeriodicOrbit:
    period: int
    points: np.ndarray       # (n, 2) in [0,1)^2
    words: np.ndarray        # (n, 2) integer translation words
    cocycle: np.ndarray      # (2, 2), Df(x_{n-1}) ... Df(x_0)
    residual: float

    def check_closure(self, f: ToralEndomorphism, tol: float = 1e-10):
        img = f.eval_lift(self.points)
        nxt = np.roll(self.points, -1, axis=0) + self.words
        return float(np.max(np.linalg.norm(img - nxt, axis=-1))) < tol


@dataclass
class ExponentPair:
    lam_u: float
    lam_s: float

    @property
    def total(self) -> float:
        return self.lam_u + self.lam_s


@dataclass
class PeriodicDataReport:
    max_period: int
    orbits: list            # list of PeriodicOrbit
    exponents: list         # list of ExponentPair, aligned with orbits
    spread: float
    verdict: str
    failures: list = field(default_factory=list)
    obstruction: Optional[float] = None


def _seed_arrays(L: IntMatrix2, orbit) -> tuple:
    pts = np.array([[float(a), float(b)] for a, b in orbit])
    e = np.asarray(L.entries, dtype=float)
    img = pts @ e.T
    words = np.round(img - np.roll(pts, -1, axis=0)).astype(int)
    return pts, words


def continue_periodic_orbit(f: ToralEndomorphism, seed, *,
                            homotopy_steps: int = 10,
                            tol: float = ORBIT_RESIDUAL_TOL) -> PeriodicOrbit:
    """Continue a rational seed orbit of L to an orbit of f.

    Multi-point shooting: unknowns x_0..x_{n-1} with equations
    F_eps(x_i) = x_{i+1} + m_i, translation words m_i frozen from the seed,
    Newton at each amplitude step eps.
    """
    L = f.linear
    pts, words = _seed_arrays(L, seed)
    n = len(pts)
    x = pts.copy()
    for eps in np.linspace(0.0, 1.0, homotopy_steps + 1)[1:]:
        g = f.scaled(float(eps))
        x = _shoot(g, x, words, tol=tol, label=f"eps={eps:.2f}")
    mind = _min_orbit_separation(x)
    if n > 1 and mind < COLLAPSE_TOL:
        raise PeriodCollapse(
            f"orbit points merged to separation {mind:.2e} during continuation"
        )
    # shooting may drift a point across a fundamental-domain wall: reduce and
    # recompute the integer words against the reduced representatives
    x = reduce_mod1(x)
    img = f.eval_lift(x)
    words = np.round(img - np.roll(x, -1, axis=0)).astype(int)
    deriv = f.derivative(x)
    cocycle = np.eye(2)
    for i in range(n):
        cocycle = deriv[i] @ cocycle
    res = float(np.max(np.linalg.norm(img - (np.roll(x, -1, axis=0) + words), axis=-1)))
    return PeriodicOrbit(period=n, points=x, words=words, cocycle=cocycle,
                         residual=res)


def _min_orbit_separation(x: np.ndarray) -> float:
    if len(x) < 2:
        return math.inf
    d = torus_distance(x[:, None, :], x[None, :, :])
    d = d + np.eye(len(x)) * 10.0
    return float(np.min(d))


def _shoot(g: ToralEndomorphism, x0: np.ndarray, words: np.ndarray,
           tol: float, label: str = "", max_iter: int = 30) -> np.ndarray:
    n = len(x0)
    x = x0.copy()
    for _ in range(max_iter):
        res = g.eval_lift(x) - (np.roll(x, -1, axis=0) + words)
        if float(np.max(np.linalg.norm(res, axis=-1))) < tol:
            return x
        deriv = g.derivative(x)
        jac = np.zeros((2 * n, 2 * n))
        for i in range(n):
            jac[2 * i:2 * i + 2, 2 * i:2 * i + 2] = deriv[i]
            j = (i + 1) % n
            jac[2 * i:2 * i + 2, 2 * j:2 * j + 2] -= np.eye(2)
        step = np.linalg.solve(jac, res.ravel()).reshape(n, 2)
        norm = np.linalg.norm(step, axis=-1, keepdims=True)
        step = np.where(norm > 0.2, step * (0.2 / np.maximum(norm, 1e-300)), step)
        x = x - step
    raise NonConvergence(f"periodic-orbit shooting failed to converge ({label})")


def orbit_exponents(orbit: PeriodicOrbit) -> ExponentPair:
    """Per-iterate Lyapunov exponents from the cocycle eigenvalues."""
    P = orbit.cocycle
    tr = P[0, 0] + P[1, 1]
    det = P[0, 0] * P[1, 1] - P[0, 1] * P[1, 0]
    disc = tr * tr - 4.0 * det
    if disc < 0.0:
        raise ComplexEigenvalues(
            f"cocycle has complex eigenvalues (trace {tr:.3g}, det {det:.3g})"
        )
    root = math.sqrt(disc)
    e1 = (tr + root) / 2.0
    e2 = (tr - root) / 2.0
    big, small = (e1, e2) if abs(e1) >= abs(e2) else (e2, e1)
    n = orbit.period
    return ExponentPair(lam_u=math.log(abs(big)) / n, lam_s=math.log(abs(small)) / n)


def orbit_log_jacobian_mean(f: ToralEndomorphism, orbit: PeriodicOrbit) -> float:
    return float(np.mean(np.log(f.jacobian(orbit.points))))


# ---------------------------------------------------------------------------
# diagnostics


def continue_all_orbits(f: ToralEndomorphism, max_period: int,
                        homotopy_steps: int = 10):
    """Continue every linear orbit of minimal period <= max_period to f.

    Returns (orbits, failures): failures is a list of (period, seed_point,
    message) for orbits whose continuation did not converge.
    """
    orbits = []
    failures = []
    for n in range(1, max_period + 1):
        for seed in periodic_orbits_linear(f.linear, n):
            try:
                orbits.append(continue_periodic_orbit(
                    f, seed, homotopy_steps=homotopy_steps))
            except (NonConvergence, PeriodCollapse) as exc:
                failures.append((n, (float(seed[0][0]), float(seed[0][1])), str(exc)))
    return orbits, failures


def specialness_diagnostic(f: ToralEndomorphism, max_period: int,
                           homotopy_steps: int = 10,
                           tol: float = ORBIT_RESIDUAL_TOL) -> PeriodicDataReport:
    """Spread of the stable exponent over periodic orbits up to max_period."""
    orbits, failures = continue_all_orbits(f, max_period, homotopy_steps)
    exponents = [orbit_exponents(o) for o in orbits]
    stables = [e.lam_s for e in exponents]
    spread = float(max(stables) - min(stables)) if stables else 0.0
    verdict = ("consistent with special" if spread < 10.0 * tol
               else "non-special at scanned periods")
    return PeriodicDataReport(max_period=max_period, orbits=orbits,
                              exponents=exponents, spread=spread,
                              verdict=verdict, failures=failures)


def livshitz_obstruction(f: ToralEndomorphism, g: ToralEndomorphism,
                         H_fg: Callable[[np.ndarray], np.ndarray],
                         max_period: int, flavor: str = "unstable",
                         homotopy_steps: int = 10) -> float:
    """Max over orbits of the per-iterate leafwise-derivative sum mismatch.

    For a periodic orbit the unstable direction is the expanding eigenvector
    of the cocycle, so the cocycle sum of log D^u equals period * lam_u; the
    per-orbit obstruction reduces to |lam^u_f(orbit) - lam^u_g(image orbit)|
    (stable flavor analogous).  Image orbits are obtained by refining the
    H_fg-image of each f-orbit with the shooting Newton on g.
    """
    if f.linear.entries != g.linear.entries:
        raise ValueError("livshitz_obstruction requires a shared linearization")
    orbits, failures = continue_all_orbits(f, max_period, homotopy_steps)
    worst = 0.0
    for orbit in orbits:
        lam_f = orbit_exponents(orbit)
        y = np.asarray(H_fg(orbit.points), dtype=float)
        img = g.eval_lift(y)
        words = np.round(img - np.roll(y, -1, axis=0)).astype(int)
        try:
            y = _shoot(g, y, words, tol=ORBIT_RESIDUAL_TOL, label="image orbit")
        except NonConvergence as exc:
            raise OrbitMatchFailed(str(exc)) from exc
        deriv = g.derivative(y)
        cocycle = np.eye(2)
        for i in range(len(y)):
            cocycle = deriv[i] @ cocycle
        lam_g = orbit_exponents(PeriodicOrbit(
            period=orbit.period, points=reduce_mod1(y), words=words,
            cocycle=cocycle, residual=0.0))
        if flavor == "unstable":
            worst = max(worst, abs(lam_f.lam_u - lam_g.lam_u))
        else:
            worst = max(worst, abs(lam_f.lam_s - lam_g.lam_s))
    return worst


# ---------------------------------------------------------------------------
# Birkhoff averages


@dataclass
class BirkhoffEstimate:
    value: float
    stderr: float
    n_steps: int
    burn_in: int


def birkhoff_exponent(f: ToralEndomorphism, x0, N: int,
                      flavor: str = "unstable", burn_in: int = 100,
                      n_blocks: int = 20) -> BirkhoffEstimate:
    """Forward Birkhoff average of log ||Df e^sigma|| along the orbit of x0.

    The tangent vector is propagated and renormalized along the reduced
    forward orbit; for the stable flavor the direction field is evaluated
    directly (forward propagation along the stable direction is unstable).
    """
    f.require_anosov()
    x0 = reduce_mod1(np.asarray(x0, dtype=float))
    orbit = np.empty((N, 2))
    z = x0.copy()
    for k in range(N):
        orbit[k] = z
        z = f.step_reduced(z)
    deriv = f.derivative(orbit)
    if flavor == "unstable":
        v = unstable_direction(f, x0, tol=1e-12).direction
        incr = np.empty(N)
        for k in range(N):
            w = deriv[k] @ v
            nw = math.sqrt(w[0] * w[0] + w[1] * w[1])
            incr[k] = math.log(nw)
            v = w / nw
    else:
        # batched stable directions along the orbit, then local growth factors
        e_s = stable_direction(f, orbit, tol=1e-12).direction
        w = (deriv @ e_s[..., None])[..., 0]
        incr = np.log(np.linalg.norm(w, axis=-1))
    tail = incr[burn_in:]
    blocks = np.array_split(tail, n_blocks)
    means = np.array([float(np.mean(b)) for b in blocks])
    stderr = float(np.std(means, ddof=1) / math.sqrt(len(means)))
    return BirkhoffEstimate(value=float(np.mean(tail)), stderr=stderr,
                            n_steps=N, burn_in=burn_in)
