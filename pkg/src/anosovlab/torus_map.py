"""Toral endomorphisms f = L + p on T^2 and their lifts F to R^2.

A map is represented as a chain of elementary stages (integer-linear maps,
trigonometric shears, trig-polynomial perturbations and their Newton
inverses).  Every stage carries coefficient-based bounds on its derivative
and on the Lipschitz constant of its derivative, so the composed map can be
grid-certified as hyperbolic with an explicit slack.

All point-valued operations are batched: points have shape (..., 2) and
derivative matrices shape (..., 2, 2).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CertificationFailed,
    DegenerateDerivative,
    ExpandingMap,
    NonConvergence,
)

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
JACOBIAN_FLOOR = 1e-6

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# linear algebra helpers


def solve2(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve batched 2x2 linear systems by the closed-form inverse."""
    a = mat[..., 0, 0]
    b = mat[..., 0, 1]
    c = mat[..., 1, 0]
    d = mat[..., 1, 1]
    det = a * d - b * c
    x = (d * rhs[..., 0] - b * rhs[..., 1]) / det
    y = (-c * rhs[..., 0] + a * rhs[..., 1]) / det
    return np.stack([x, y], axis=-1)


def det2(mat: np.ndarray) -> np.ndarray:
    return mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]


def opnorm2(mat: np.ndarray) -> float:
    """Spectral norm of a single 2x2 matrix."""
    return float(np.linalg.norm(np.asarray(mat, dtype=float), 2))


def reduce_mod1(x: np.ndarray) -> np.ndarray:
    """Representative of x in the fundamental domain [0,1)^2."""
    return x - np.floor(x)


def torus_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Distance on T^2: minimum over the nine adjacent integer translates."""
    d = reduce_mod1(np.asarray(x, dtype=float)) - reduce_mod1(np.asarray(y, dtype=float))
    d = d - np.round(d)
    return np.linalg.norm(d, axis=-1)


# ---------------------------------------------------------------------------
# integer matrices and their classification


class MapClass(enum.Enum):
    NON_INVERTIBLE_ANOSOV = "NonInvertibleAnosov"
    INVERTIBLE_ANOSOV = "InvertibleAnosov"
    EXPANDING = "Expanding"
    NOT_HYPERBOLIC = "NotHyperbolic"


@dataclass(frozen=True)
class IntMatrix2:
    """A 2x2 integer matrix with cached hyperbolic eigen-data.

    For real distinct eigenvalues, `lam_u` is the one of larger modulus and
    `v_u`, `v_s` are unit eigenvectors; `basis` has them as columns.
    """

    entries: tuple

    def __post_init__(self):
        m = np.asarray(self.entries)
        if m.shape != (2, 2) or not np.all(m == np.round(m)):
            raise ValueError("IntMatrix2 requires a 2x2 integer matrix")
        if self.det == 0:
            raise ValueError("IntMatrix2 must be nonsingular")

    @classmethod
    def from_array(cls, m) -> "IntMatrix2":
        m = np.asarray(m)
        return cls(tuple(tuple(int(round(v)) for v in row) for row in m))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=float)

    @property
    def det(self) -> int:
        (a, b), (c, d) = self.entries
        return a * d - b * c

    @property
    def trace(self) -> int:
        return self.entries[0][0] + self.entries[1][1]

    @property
    def discriminant(self) -> int:
        return self.trace * self.trace - 4 * self.det

    def has_real_distinct_eigenvalues(self) -> bool:
        return self.discriminant > 0

    def eigen_data(self):
        """Return (lam_u, lam_s, basis, basis_inv); requires real distinct spectrum."""
        if not self.has_real_distinct_eigenvalues():
            raise ValueError("eigen data requires real distinct eigenvalues")
        tr = float(self.trace)
        root = math.sqrt(float(self.discriminant))
        l1 = (tr + root) / 2.0
        l2 = (tr - root) / 2.0
        lam_u, lam_s = (l1, l2) if abs(l1) >= abs(l2) else (l2, l1)
        basis = np.column_stack([self._eigenvector(lam_u), self._eigenvector(lam_s)])
        return lam_u, lam_s, basis, np.linalg.inv(basis)

    def _eigenvector(self, lam: float) -> np.ndarray:
        (a, b), (c, d) = self.entries
        v1 = np.array([float(b), lam - a])
        v2 = np.array([lam - d, float(c)])
        v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
        return v / np.linalg.norm(v)


def classify_linear(L: IntMatrix2) -> MapClass:
    """Classify an integer matrix by its eigenvalue moduli and |det|."""
    if L.discriminant < 0:
        modulus = math.sqrt(abs(L.det))
        if modulus > 1.0:
            return MapClass.EXPANDING
        return MapClass.NOT_HYPERBOLIC
    if L.discriminant == 0:
        lam = abs(L.trace) / 2.0
        return MapClass.EXPANDING if lam > 1.0 else MapClass.NOT_HYPERBOLIC
    lam_u, lam_s, _, _ = L.eigen_data()
    if abs(lam_u) > 1.0 and abs(lam_s) > 1.0:
        return MapClass.EXPANDING
    if abs(lam_u) > 1.0 and abs(lam_s) < 1.0:
        if abs(L.det) == 1:
            return MapClass.INVERTIBLE_ANOSOV
        return MapClass.NON_INVERTIBLE_ANOSOV
    return MapClass.NOT_HYPERBOLIC


# ---------------------------------------------------------------------------
# trigonometric polynomials


@dataclass(frozen=True)
class TrigTerm:
    k: tuple  # frequency in Z^2
    a: tuple  # amplitude vector in R^2
    phase: float = 0.0


class TrigPolynomial2:
    """Finite sum of terms a * sin(2 pi k.x + phase), a vector field on R^2.

    Values and derivatives are Z^2-periodic by construction; sup / Lipschitz
    bounds follow from the coefficients.
    """

    def __init__(self, terms: Sequence[TrigTerm]):
        self.terms = [TrigTerm(tuple(t.k), tuple(t.a), float(t.phase)) for t in terms]
        self._k = np.array([t.k for t in self.terms], dtype=float).reshape(-1, 2)
        self._a = np.array([t.a for t in self.terms], dtype=float).reshape(-1, 2)
        self._phase = np.array([t.phase for t in self.terms], dtype=float)

    def __len__(self):
        return len(self.terms)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.terms:
            return np.zeros_like(x)
        arg = TWO_PI * np.tensordot(x, self._k.T, axes=([-1], [0])) + self._phase
        return np.tensordot(np.sin(arg), self._a, axes=([-1], [0]))

    def deriv(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out_shape = x.shape[:-1] + (2, 2)
        if not self.terms:
            return np.zeros(out_shape)
        arg = TWO_PI * np.tensordot(x, self._k.T, axes=([-1], [0])) + self._phase
        cos = np.cos(arg)  # (..., nterms)
        outer = self._a[:, :, None] * (TWO_PI * self._k[:, None, :])  # (n,2,2)
        return np.tensordot(cos, outer, axes=([-1], [0]))

    @property
    def sup(self) -> float:
        return float(sum(np.linalg.norm(t.a) for t in self.terms))

    @property
    def deriv_sup(self) -> float:
        return float(
            sum(np.linalg.norm(t.a) * TWO_PI * np.linalg.norm(t.k) for t in self.terms)
        )

    @property
    def deriv_lip(self) -> float:
        return float(
            sum(
                np.linalg.norm(t.a) * (TWO_PI * np.linalg.norm(t.k)) ** 2
                for t in self.terms
            )
        )

    def scaled(self, factor: float) -> "TrigPolynomial2":
        return TrigPolynomial2(
            [TrigTerm(t.k, tuple(factor * v for v in t.a), t.phase) for t in self.terms]
        )


class TrigPolynomial1:
    """Scalar trig polynomial s(u) = sum c * sin(2 pi k u + phase), k integer."""

    def __init__(self, terms: Sequence[tuple]):
        # terms: iterable of (k, c, phase)
        self.terms = [(int(k), float(c), float(ph)) for k, c, ph in terms]

    def value(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for k, c, ph in self.terms:
            out = out + c * np.sin(TWO_PI * k * u + ph)
        return out

    def deriv(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for k, c, ph in self.terms:
            out = out + c * TWO_PI * k * np.cos(TWO_PI * k * u + ph)
        return out

    @property
    def sup(self) -> float:
        return float(sum(abs(c) for _, c, _ in self.terms))

    @property
    def deriv_sup(self) -> float:
        return float(sum(abs(c) * TWO_PI * abs(k) for k, c, _ in self.terms))

    @property
    def deriv_lip(self) -> float:
        return float(sum(abs(c) * (TWO_PI * k) ** 2 for k, c, _ in self.terms))

    def scaled(self, factor: float) -> "TrigPolynomial1":
        return TrigPolynomial1([(k, factor * c, ph) for k, c, ph in self.terms])


# ---------------------------------------------------------------------------
# elementary stages


class Stage:
    """One factor of a composed lift.  Subclasses provide values, derivatives,
    coefficient bounds and (when available) an exact inverse stage."""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def deriv(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def linear_part(self) -> np.ndarray:
        return np.eye(2)

    @property
    def shift_sup(self) -> float:
        """Bound on sup ||stage(x) - linear_part x||."""
        raise NotImplementedError

    @property
    def deriv_sup(self) -> float:
        raise NotImplementedError

    @property
    def deriv_lip(self) -> float:
        raise NotImplementedError

    @property
    def det_constant(self) -> Optional[float]:
        """|det D stage| when it is constant in x, else None."""
        return None

    def inverse(self) -> Optional["Stage"]:
        return None

    def scaled(self, factor: float) -> "Stage":
        raise NotImplementedError


class LinearStage(Stage):
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def value(self, x):
        return np.tensordot(np.asarray(x, dtype=float), self.matrix.T, axes=([-1], [0]))

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.matrix, x.shape[:-1] + (2, 2)).copy()

    @property
    def linear_part(self):
        return self.matrix

    @property
    def shift_sup(self):
        return 0.0

    @property
    def deriv_sup(self):
        return opnorm2(self.matrix)

    @property
    def deriv_lip(self):
        return 0.0

    @property
    def det_constant(self):
        return abs(float(np.linalg.det(self.matrix)))

    def inverse(self):
        return LinearStage(np.linalg.inv(self.matrix))

    def scaled(self, factor):
        return self


class ShearStage(Stage):
    """axis=0: (x1 + s(x2), x2);  axis=1: (x1, x2 + s(x1)).  Unit Jacobian."""

    def __init__(self, axis: int, poly: TrigPolynomial1):
        if axis not in (0, 1):
            raise ValueError("axis must be 0 or 1")
        self.axis = axis
        self.poly = poly

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        other = 1 - self.axis
        out[..., self.axis] = x[..., self.axis] + self.poly.value(x[..., other])
        return out

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        other = 1 - self.axis
        d = self.poly.deriv(x[..., other])
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        out[..., self.axis, other] = d
        return out

    @property
    def shift_sup(self):
        return self.poly.sup

    @property
    def deriv_sup(self):
        # ||I + N|| <= 1 + ||N|| with N a single off-diagonal entry
        return 1.0 + self.poly.deriv_sup

    @property
    def deriv_lip(self):
        return self.poly.deriv_lip

    @property
    def det_constant(self):
        return 1.0

    def inverse(self):
        return ShearStage(self.axis, self.poly.scaled(-1.0))

    def scaled(self, factor):
        return ShearStage(self.axis, self.poly.scaled(factor))


class PerturbStage(Stage):
    """x -> x + p(x) with p a trig-polynomial vector field."""

    def __init__(self, poly: TrigPolynomial2):
        self.poly = poly

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return x + self.poly.value(x)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        d = self.poly.deriv(x)
        d[..., 0, 0] += 1.0
        d[..., 1, 1] += 1.0
        return d

    @property
    def shift_sup(self):
        return self.poly.sup

    @property
    def deriv_sup(self):
        return 1.0 + self.poly.deriv_sup

    @property
    def deriv_lip(self):
        return self.poly.deriv_lip

    def inverse(self):
        if self.poly.deriv_sup < 1.0:
            return NewtonInverseStage(self)
        return None

    def scaled(self, factor):
        return PerturbStage(self.poly.scaled(factor))


class NewtonInverseStage(Stage):
    """Inverse of (Id + p), evaluated by the contraction x = y - p(x)."""

    def __init__(self, forward: PerturbStage):
        if forward.poly.deriv_sup >= 1.0:
            raise ValueError("Id + p is not certifiably invertible: ||Dp|| >= 1")
        self.forward = forward
        self._contraction = forward.poly.deriv_sup

    def value(self, y):
        y = np.asarray(y, dtype=float)
        x = y.copy()
        # absolute tolerance scaled by coordinate size (rounding floor on the cover)
        thresh = NEWTON_TOL * 0.1 * (1.0 + float(np.max(np.abs(y))) if y.size else 1.0)
        for _ in range(NEWTON_MAX_ITER * 4):
            step = y - self.forward.poly.value(x) - x
            x = x + step
            if float(np.max(np.abs(step))) < thresh:
                return x
        raise NonConvergence("fixed-point inversion of Id + p did not converge")

    def deriv(self, y):
        x = self.value(y)
        return _batched_inv2(self.forward.deriv(x))

    @property
    def shift_sup(self):
        return self.forward.poly.sup

    @property
    def deriv_sup(self):
        return 1.0 / (1.0 - self._contraction)

    @property
    def deriv_lip(self):
        return self.forward.poly.deriv_lip / (1.0 - self._contraction) ** 3

    def inverse(self):
        return self.forward

    def scaled(self, factor):
        return NewtonInverseStage(self.forward.scaled(factor))


def _batched_inv2(mat: np.ndarray) -> np.ndarray:
    d = det2(mat)
    out = np.empty_like(mat)
    out[..., 0, 0] = mat[..., 1, 1] / d
    out[..., 0, 1] = -mat[..., 0, 1] / d
    out[..., 1, 0] = -mat[..., 1, 0] / d
    out[..., 1, 1] = mat[..., 0, 0] / d
    return out


# ---------------------------------------------------------------------------
# the endomorphism


@dataclass
class HyperbolicityCertificate:
    theta_u: float
    theta_s: float
    mu_u: float
    mu_s: float
    grid_n: int
    lip_slack: float
    map_class: MapClass

    def check(self):
        assert self.mu_u > 1.0 and self.mu_s < 1.0


class ToralEndomorphism:
    """A lift F: R^2 -> R^2 of a C-infinity endomorphism of T^2, as a stage chain.

    The chain's composed linear part must equal the integer linearization L,
    which makes F(x + m) = F(x) + L m exact up to rounding.
    """

    def __init__(self, linear: IntMatrix2, stages: Sequence[Stage], *,
                 kind: str = "raw", ground_truth_h: Optional[Sequence[Stage]] = None,
                 jacobian_floor: float = JACOBIAN_FLOOR):
        self.linear = linear
        self.stages = list(stages)
        self.kind = kind
        self.ground_truth_h = list(ground_truth_h) if ground_truth_h else None
        self.jacobian_floor = jacobian_floor
        self._certificate: Optional[HyperbolicityCertificate] = None
        lin = np.eye(2)
        for st in self.stages:
            lin = st.linear_part @ lin
        if not np.allclose(lin, linear.array, atol=1e-9):
            raise ValueError("stage chain linear part does not match the linearization")

    # -- basic queries ------------------------------------------------------

    @property
    def map_class(self) -> MapClass:
        return classify_linear(self.linear)

    @property
    def is_linear(self) -> bool:
        return all(isinstance(st, LinearStage) for st in self.stages)

    @property
    def constant_jacobian(self) -> Optional[float]:
        """|det Df| when constant by construction, else None."""
        total = 1.0
        for st in self.stages:
            d = st.det_constant
            if d is None:
                return None
            total *= d
        return total

    def require_anosov(self):
        cls = self.map_class
        if cls is MapClass.EXPANDING:
            raise ExpandingMap("expanding map: stable apparatus unavailable")
        if cls is MapClass.NOT_HYPERBOLIC:
            raise CertificationFailed("linearization is not hyperbolic")

    def eigen_data(self):
        return self.linear.eigen_data()

    @property
    def certificate(self) -> Optional[HyperbolicityCertificate]:
        return self._certificate

    # -- evaluation ---------------------------------------------------------

    def eval_lift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        for st in self.stages:
            x = st.value(x)
        return x

    def derivative(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mat = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        for st in self.stages:
            mat = st.deriv(x) @ mat
            x = st.value(x)
        return mat

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        jac = np.abs(det2(self.derivative(x)))
        if np.any(jac < self.jacobian_floor):
            raise DegenerateDerivative(
                f"|det Df| = {float(np.min(jac)):.3e} below floor {self.jacobian_floor:.1e}"
            )
        return jac

    def step_reduced(self, x: np.ndarray) -> np.ndarray:
        """F followed by reduction to [0,1)^2 (valid for torus-level orbits)."""
        return reduce_mod1(self.eval_lift(x))

    # -- coefficient bounds -------------------------------------------------

    def perturbation_sup_bound(self) -> float:
        """Bound on sup ||F(x) - L x||."""
        bound = 0.0
        prefix = np.eye(2)
        suffixes = []
        # suffix linear parts: product of linear parts of stages after i
        lin_parts = [st.linear_part for st in self.stages]
        for i in range(len(self.stages)):
            after = np.eye(2)
            for m in lin_parts[i + 1:]:
                after = m @ after
            suffixes.append(after)
        for st, after in zip(self.stages, suffixes):
            bound += opnorm2(after) * st.shift_sup
        return bound

    def deriv_sup_bound(self) -> float:
        out = 1.0
        for st in self.stages:
            out *= st.deriv_sup
        return out

    def deriv_lip_bound(self) -> float:
        """Lipschitz bound for x -> DF(x), composed stage by stage."""
        sup, lip = 1.0, 0.0
        for st in self.stages:
            # D(st o G)(x) = Dst(G x) Dg(x)
            lip = st.deriv_lip * sup * sup + st.deriv_sup * lip
            sup = st.deriv_sup * sup
        return lip

    # -- inversion ----------------------------------------------------------

    def invert_lift(self, y: np.ndarray, guess: Optional[np.ndarray] = None,
                    tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
        """Solve F(x) = y by Newton iteration (default guess L^{-1} y)."""
        y = np.asarray(y, dtype=float)
        if guess is None:
            x = np.tensordot(y, np.linalg.inv(self.linear.array).T, axes=([-1], [0]))
        else:
            x = np.asarray(guess, dtype=float).copy()
            x = np.broadcast_to(x, y.shape).copy()
        # absolute tolerance scaled by coordinate size (rounding floor on the cover)
        tol = tol * (1.0 + (float(np.max(np.abs(y))) if y.size else 0.0))
        for _ in range(max_iter):
            res = self.eval_lift(x) - y
            if float(np.max(np.linalg.norm(res, axis=-1))) < tol:
                return x
            step = solve2(self.derivative(x), res)
            nstep = np.linalg.norm(step, axis=-1, keepdims=True)
            step = np.where(nstep > 0.5, step * (0.5 / np.maximum(nstep, 1e-300)), step)
            x = x - step
        raise NonConvergence(
            f"invert_lift: residual {float(np.max(np.linalg.norm(self.eval_lift(x) - y, axis=-1))):.3e} "
            f"after {max_iter} iterations"
        )

    def backward_step_reduced(self, x: np.ndarray, guess: Optional[np.ndarray] = None):
        """One reduced backward step: returns (z, shift) with F(z + shift) = x + shift', z in [0,1)^2.

        Only the reduced representative matters for periodic data (DF is
        Z^2-periodic), so the shift is dropped.
        """
        z = self.invert_lift(x, guess=guess)
        return reduce_mod1(z)

    # -- reparametrized families --------------------------------------------

    def scaled(self, eps: float) -> "ToralEndomorphism":
        """Member of the homotopy family with all trig amplitudes scaled by eps."""
        return ToralEndomorphism(
            self.linear,
            [st.scaled(eps) for st in self.stages],
            kind=self.kind,
            ground_truth_h=[st.scaled(eps) for st in self.ground_truth_h]
            if self.ground_truth_h
            else None,
            jacobian_floor=self.jacobian_floor,
        )

    def eval_ground_truth_h(self, x: np.ndarray) -> np.ndarray:
        if self.ground_truth_h is None:
            raise ValueError("map was not built with a ground-truth conjugating h")
        x = np.asarray(x, dtype=float)
        for st in self.ground_truth_h:
            x = st.value(x)
        return x

    def deriv_ground_truth_h(self, x: np.ndarray) -> np.ndarray:
        if self.ground_truth_h is None:
            raise ValueError("map was not built with a ground-truth conjugating h")
        x = np.asarray(x, dtype=float)
        mat = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        for st in self.ground_truth_h:
            mat = st.deriv(x) @ mat
            x = st.value(x)
        return mat


# ---------------------------------------------------------------------------
# constructors


def make_raw(L, terms: Sequence[TrigTerm]) -> ToralEndomorphism:
    """f with lift F(x) = L x + p(x), p a trig-polynomial field."""
    L = L if isinstance(L, IntMatrix2) else IntMatrix2.from_array(L)
    poly = TrigPolynomial2(terms)
    if len(poly):
        stages = [PerturbStageAfterLinear(L.array, poly)]
    else:
        stages = [LinearStage(L.array)]
    return ToralEndomorphism(L, stages, kind="raw")


class PerturbStageAfterLinear(Stage):
    """Single stage computing L x + p(x) directly (p evaluated at the input)."""

    def __init__(self, matrix, poly: TrigPolynomial2):
        self.matrix = np.asarray(matrix, dtype=float)
        self.poly = poly

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.tensordot(x, self.matrix.T, axes=([-1], [0])) + self.poly.value(x)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return self.matrix + self.poly.deriv(x)

    @property
    def linear_part(self):
        return self.matrix

    @property
    def shift_sup(self):
        return self.poly.sup

    @property
    def deriv_sup(self):
        return opnorm2(self.matrix) + self.poly.deriv_sup

    @property
    def deriv_lip(self):
        return self.poly.deriv_lip

    def scaled(self, factor):
        return PerturbStageAfterLinear(self.matrix, self.poly.scaled(factor))


def make_shear_composition(L, s_terms, t_terms) -> ToralEndomorphism:
    """Constant-Jacobian family f = L o S1 o S2.

    S1(x) = (x1, x2 + s(x1)) and S2(x) = (x1 + t(x2), x2) are unit-Jacobian
    shears, so Jf = |det L| everywhere.
    """
    L = L if isinstance(L, IntMatrix2) else IntMatrix2.from_array(L)
    s1 = ShearStage(1, TrigPolynomial1(s_terms))
    s2 = ShearStage(0, TrigPolynomial1(t_terms))
    return ToralEndomorphism(L, [s2, s1, LinearStage(L.array)], kind="shear_composition")


def make_smooth_conjugate(L, h_terms=None, *, h_shears=None) -> ToralEndomorphism:
    """f = h^{-1} o A o h with A = L and h = Id + small trig perturbation.

    Pass `h_shears=(s_terms, t_terms)` instead of `h_terms` for an
    area-preserving h (composition of two unit-Jacobian shears), which keeps
    Jf constant.  The ground-truth h is stored for oracle tests.
    """
    L = L if isinstance(L, IntMatrix2) else IntMatrix2.from_array(L)
    if (h_terms is None) == (h_shears is None):
        raise ValueError("pass exactly one of h_terms, h_shears")
    if h_terms is not None:
        poly = TrigPolynomial2(h_terms)
        if poly.deriv_sup >= 1.0:
            raise ValueError("||Dh - I|| bound >= 1: h not certifiably invertible")
        h_stages = [PerturbStage(poly)]
    else:
        s_terms, t_terms = h_shears
        h_stages = [ShearStage(0, TrigPolynomial1(t_terms)),
                    ShearStage(1, TrigPolynomial1(s_terms))]
    inv_stages = []
    for st in reversed(h_stages):
        inv = st.inverse()
        if inv is None:
            raise ValueError("conjugating h is not invertible")
        inv_stages.append(inv)
    stages = list(h_stages) + [LinearStage(L.array)] + inv_stages
    return ToralEndomorphism(L, stages, kind="smooth_conjugate", ground_truth_h=h_stages)


def make_linear(L) -> ToralEndomorphism:
    L = L if isinstance(L, IntMatrix2) else IntMatrix2.from_array(L)
    return ToralEndomorphism(L, [LinearStage(L.array)], kind="raw")


# ---------------------------------------------------------------------------
# certification


def _specnorm2_batch(mat: np.ndarray) -> np.ndarray:
    """Spectral norms of batched 2x2 matrices in closed form."""
    t = np.sum(mat * mat, axis=(-2, -1))
    d = np.abs(det2(mat))
    gap = np.sqrt(np.maximum(t * t - 4.0 * d * d, 0.0))
    return np.sqrt((t + gap) / 2.0)


ANGLE_LADDER = (0.1, 0.3, 0.5, 0.7, 0.9)


def certify_hyperbolicity(f: ToralEndomorphism, grid_n: int = 256,
                          theta_u: Optional[float] = None,
                          theta_s: Optional[float] = None) -> HyperbolicityCertificate:
    """Grid-certify cone invariance and growth for the lift.

    Cones are defined in the eigenbasis of L: the unstable cone is
    |c_s| <= tan(theta_u) |c_u| and growth is measured in the eigenbasis
    max-norm (an adapted metric).  Each grid cell carries a Lipschitz slack
    derived from the coefficient bounds, so the verdict holds for every point
    of the cell, not just its center.

    When an angle is None, the smallest angle from a fixed ladder whose side
    certifies is chosen; the two sides are independent.
    """
    f.require_anosov()
    lam_u, lam_s, basis, basis_inv = f.eigen_data()
    n = int(grid_n)
    axis = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    dmat = f.derivative(pts)  # (N,2,2)
    B = basis_inv[None] @ dmat @ basis[None]
    cond = opnorm2(basis) * opnorm2(basis_inv)
    cell_radius = math.sqrt(2.0) / (2.0 * n)
    slack = f.deriv_lip_bound() * cond * cell_radius

    absB = np.abs(B)
    Binv = _batched_inv2(B)
    # first-order inverse perturbation: |dN| <= ||N||^2 |dB| / (1 - ||N|| |dB|)
    inv_norms = _specnorm2_batch(Binv)
    denom = 1.0 - inv_norms * slack
    slack_inv = np.where(denom <= 0.0, np.inf,
                         inv_norms ** 2 * slack / np.maximum(denom, 1e-300))
    absN = np.abs(Binv)

    def side_u(theta):
        gu = math.tan(theta)
        grow = (absB[:, 0, 0] - slack) - gu * (absB[:, 0, 1] + slack)
        inv = gu * grow - ((absB[:, 1, 0] + slack) + gu * (absB[:, 1, 1] + slack))
        return grow, np.minimum(grow - 1.0, inv)

    def side_s(theta):
        gs = math.tan(theta)
        grow = (absN[:, 1, 1] - slack_inv) - gs * (absN[:, 1, 0] + slack_inv)
        inv = gs * grow - ((absN[:, 0, 1] + slack_inv) + gs * (absN[:, 0, 0] + slack_inv))
        return grow, np.minimum(grow - 1.0, inv)

    def pick(theta_fixed, side):
        ladder = (theta_fixed,) if theta_fixed is not None else ANGLE_LADDER
        best = None
        for theta in ladder:
            grow, margin = side(theta)
            worst = float(np.min(margin))
            if best is None or worst > best[1]:
                best = (theta, worst, grow, int(np.argmin(margin)))
            if worst > 0.0:
                return theta, worst, grow, int(np.argmin(margin))
        return best

    theta_u_used, worst_u, grow_u, cell_u = pick(theta_u, side_u)
    theta_s_used, worst_s, grow_s, cell_s = pick(theta_s, side_s)
    if min(worst_u, worst_s) <= 0.0:
        flat = cell_u if worst_u <= worst_s else cell_s
        cell = (flat // n, flat % n)
        raise CertificationFailed(
            f"cone condition failed at cell {cell} with margin {min(worst_u, worst_s):.3e}",
            cell=cell, margin=float(min(worst_u, worst_s)),
        )
    mu_u = float(np.min(grow_u))
    mu_s = float(1.0 / np.min(grow_s))
    cert = HyperbolicityCertificate(
        theta_u=theta_u_used, theta_s=theta_s_used, mu_u=mu_u, mu_s=mu_s,
        grid_n=n, lip_slack=float(slack), map_class=f.map_class,
    )
    f._certificate = cert
    return cert
