"""Exception and warning types shared across the package."""


class SingularFiber(RuntimeError):
    """The gradient of the observable vanishes on the requested level set."""


class TangentialIntersection(RuntimeError):
    """A root of the level equations fails the transversality bound.

    Carries the offending points in ``.points`` so callers can inspect them.
    """

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = list(points)


class PointNotOnFiber(ValueError):
    """An endpoint handed to a fiber line integral is not on the level set."""


class NoReferencePoint(RuntimeError):
    """A fiber does not meet the reference Lagrangian inside the domain."""


class TangencyAtEndpoint(RuntimeError):
    """A turning-point count was requested for a segment ending on a tangency."""


class NonMonotoneAction(RuntimeError):
    """The loop action is not monotone on the requested level range."""


class DegenerateStationaryPoint(RuntimeError):
    """Stationary-phase composition hit a vanishing second derivative."""


class GridMismatch(ValueError):
    """Two grid-sampled states live on different grids."""


class OpenFiber(RuntimeError):
    """Half-density bridging requested for a non-linear open fiber."""


class CountMismatch(ValueError):
    """Eigenvalue and quantization-level counts cannot be paired."""


class UnsupportedOrdering(ValueError):
    """Operator construction requested beyond quadratic momentum degree."""


class OrderOverflow(ValueError):
    """Formal series order exceeds the supported truncation bound."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class CausticNearby(UserWarning):
    """An intersection sits close to a tangential (caustic) configuration."""


class DoubleRoot(UserWarning):
    """The transversality bracket touches zero without changing sign."""


class HessianCrossCheck(UserWarning):
    """Finite-difference Hessian deviates from the bracket identity."""


class LevelSkipped(UserWarning):
    """A level in a quantization scan had no closed fiber and was skipped."""


class DegenerateFit(RuntimeError):
    """All errors sit at machine precision; no slope can be fitted."""
