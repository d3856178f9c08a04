"""Exception types shared across the lab modules."""


class AnosovLabError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateDerivative(AnosovLabError):
    """|det Df(x)| fell below the local-diffeomorphism floor."""


class NonConvergence(AnosovLabError):
    """An iterative solve (Newton, continuation, direction field) did not converge."""


class CertificationFailed(AnosovLabError):
    """Grid certification of cone invariance / growth failed.

    Carries the offending cell index and the margin by which it failed.
    """

    def __init__(self, message, cell=None, margin=None):
        super().__init__(message)
        self.cell = cell
        self.margin = margin


class ExpandingMap(AnosovLabError):
    """Stable-direction machinery requested for an expanding linearization."""


class NoIntersection(AnosovLabError):
    """A holonomy search left its window without crossing the target leaf."""


class NotOnSameLeaf(AnosovLabError):
    """A point could not be resolved on the leaf segment owning a computation."""


class InsufficientScaleRange(AnosovLabError):
    """Fewer than the minimum number of scales were usable for a regression."""


class PeriodCollapse(AnosovLabError):
    """Two points of a continued periodic orbit merged during the homotopy."""


class ComplexEigenvalues(AnosovLabError):
    """A periodic cocycle has non-real eigenvalues (hyperbolicity violation)."""


class OrbitMatchFailed(AnosovLabError):
    """Newton refinement of a conjugacy-image orbit diverged."""


class InjectivityViolation(AnosovLabError):
    """A foliated box does not project injectively to the torus."""


class ConfigError(AnosovLabError):
    """A lab config file failed to parse or validate."""
