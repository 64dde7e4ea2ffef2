"""Exception hierarchy; the CLI maps these onto exit codes."""


class ShrinkLabError(Exception):
    """Base class for all shrinklab errors."""


class GeometryError(ShrinkLabError):
    """Base-shrinker construction or graph-geometry failure (exit code 2)."""


class ShootingError(GeometryError):
    """Profile shooting failed to bracket or close a profile."""


class InadmissibleGraphError(GeometryError):
    """Graph function leaves the tubular neighborhood of its base."""


class ReexpressionError(GeometryError):
    """Newton re-expression of a surface as a normal graph did not converge."""


class SpectralError(ShrinkLabError):
    """Eigenproblem failure (exit code 3)."""


class SpectralGapError(SpectralError):
    """Unidentified eigenvalue inside the gap window around -1."""


class FlowError(ShrinkLabError):
    """Time-stepping failure (exit code 4)."""


class FlowEscape(FlowError):
    """The flow left the graph neighborhood before the requested time.

    This is an outcome, not a bug: dynamics experiments catch it and record
    an exit.  Carries the last admissible state and the time reached.
    """

    def __init__(self, message, state=None, time=None, trace=None):
        super().__init__(message)
        self.state = state
        self.time = time
        self.trace = trace


class BalanceError(ShrinkLabError):
    """Entropy maximization or balancing-map failure."""
