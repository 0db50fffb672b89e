"""Exception types raised across the package."""


class AnnulusError(Exception):
    """Base class for all package errors."""


class NotOnBoundary(AnnulusError):
    """A boundary operation was requested at a point that is not on either shell."""


class VerticalState(AnnulusError):
    """The planar velocity vanishes, so exit times and hits are undefined."""


class CaseMismatch(AnnulusError):
    """A quantity was requested for a bounce case where it is not defined."""


class BounceOverflow(AnnulusError):
    """The event-driven oracle exceeded its bounce budget."""


class TooFarApart(AnnulusError):
    """The two positions are too far apart for the shifted point to exist."""


class DegenerateDirection(AnnulusError):
    """The displacement is parallel or anti-parallel to the reference direction."""


class PathExitsDomain(AnnulusError):
    """An interpolating path left the annulus."""


class ZeroShift(AnnulusError):
    """The interpolating path has zero length."""


class PreconditionViolated(AnnulusError):
    """The ordering of critical parameters required by an estimate does not hold."""


class BetaOutOfRange(AnnulusError):
    """The Holder exponent lies outside the range where the integral is finite."""


class EmptyInput(AnnulusError):
    """An aggregate was requested over an empty collection."""


class GrazingTooClose(AnnulusError):
    """A derivative check was requested too close to the grazing set."""


class ZeroZeta(AnnulusError):
    """A kernel was evaluated at zero relative velocity."""
