"""Exception types raised across the package."""


class QTrajError(Exception):
    """Base class for all package errors."""


class DegenerateState(QTrajError):
    pass


class InvalidStrength(QTrajError):
    pass


class SingularCoordinate(QTrajError):
    pass


class SingularMeasure(QTrajError):
    pass


class EmptyBin(QTrajError):
    """A post-selection bin received no trajectories.

    The exception carries the counts so callers can still report a
    confidence bound instead of a ratio.
    """

    def __init__(self, message, n_winding=0, n_nonwinding=0, n_total=0):
        super().__init__(message)
        self.n_winding = n_winding
        self.n_nonwinding = n_nonwinding
        self.n_total = n_total


class NoConvergence(QTrajError):
    pass


class SingularJacobian(QTrajError):
    pass


class BranchLost(QTrajError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class NoBracket(QTrajError):
    pass


class NoFlip(QTrajError):
    pass


class AntipodalEndpoints(QTrajError):
    pass


class GridTooCoarse(QTrajError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonQuantized(QTrajError):
    pass


class DegenerateClock(QTrajError):
    pass


class ConjugatePoint(QTrajError):
    pass


class NotConverged(QTrajError):
    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class ConfigError(QTrajError):
    pass
