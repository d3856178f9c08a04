"""Numerical laboratory for rigidity of Anosov endomorphisms on the 2-torus."""

__version__ = "0.1.0"

from .errors import (
    AnosovLabError,
    CertificationFailed,
    ComplexEigenvalues,
    ConfigError,
    DegenerateDerivative,
    ExpandingMap,
    InjectivityViolation,
    InsufficientScaleRange,
    NoIntersection,
    NonConvergence,
    NotOnSameLeaf,
    OrbitMatchFailed,
    PeriodCollapse,
)
from .torus_map import (
    IntMatrix2,
    MapClass,
    ToralEndomorphism,
    TrigPolynomial1,
    TrigPolynomial2,
    TrigTerm,
    certify_hyperbolicity,
    classify_linear,
    make_linear,
    make_raw,
    make_shear_composition,
    make_smooth_conjugate,
)
from .splitting import (
    grow_leaf_segment,
    splitting_directions,
    stable_direction,
    stable_holonomy,
    unstable_direction,
)
from .conjugacy import build_conjugacy, estimate_holder_along_leaf, eval_H, eval_H_inverse
from .periodic_data import (
    birkhoff_exponent,
    continue_periodic_orbit,
    livshitz_obstruction,
    orbit_exponents,
    periodic_orbits_linear,
    periodic_points_linear,
    specialness_diagnostic,
)
from .leaf_measures import (
    LeafDensityEvaluator,
    build_foliated_box,
    covering_height,
    disintegrate_volume,
    leaf_growth_ratio,
    theoremB_verdict,
    ubd_constant,
)

__all__ = [
    "AnosovLabError",
    "CertificationFailed",
    "ComplexEigenvalues",
    "ConfigError",
    "DegenerateDerivative",
    "ExpandingMap",
    "InjectivityViolation",
    "InsufficientScaleRange",
    "IntMatrix2",
    "LeafDensityEvaluator",
    "MapClass",
    "NoIntersection",
    "NonConvergence",
    "NotOnSameLeaf",
    "OrbitMatchFailed",
    "PeriodCollapse",
    "ToralEndomorphism",
    "TrigPolynomial1",
    "TrigPolynomial2",
    "TrigTerm",
    "birkhoff_exponent",
    "build_conjugacy",
    "build_foliated_box",
    "certify_hyperbolicity",
    "classify_linear",
    "continue_periodic_orbit",
    "covering_height",
    "disintegrate_volume",
    "estimate_holder_along_leaf",
    "eval_H",
    "eval_H_inverse",
    "grow_leaf_segment",
    "leaf_growth_ratio",
    "livshitz_obstruction",
    "make_linear",
    "make_raw",
    "make_shear_composition",
    "make_smooth_conjugate",
    "orbit_exponents",
    "periodic_orbits_linear",
    "periodic_points_linear",
    "specialness_diagnostic",
    "splitting_directions",
    "stable_direction",
    "stable_holonomy",
    "theoremB_verdict",
    "ubd_constant",
    "unstable_direction",
]
