"""Exception types shared across the toolkit."""


class SLGlueError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SLGlueError):
    """Bad input data or parameters (CLI exit code 2)."""


class NumericalError(SLGlueError):
    """A numerical procedure failed to converge or certify (CLI exit code 3)."""


# -- construction / geometry gates -------------------------------------------

class PhaseDegenerate(NumericalError):
    """|Omega restricted to the mesh| deviates too far from psi^m."""


class BranchAmbiguity(NumericalError):
    """cos(theta) <= 0 somewhere; the phase branch cannot be anchored."""


class StepTooLarge(ValidationError):
    """sup|df| exceeds the tubular neighbourhood bound."""


class ChartFailure(NumericalError):
    """A cell's tangent plane is degenerate or outside every usable chart."""


class BadAngles(ValidationError):
    """Plane-pair angles incompatible with a special Lagrangian neck."""


class ConeMismatch(ValidationError):
    """Configuration cone and asymptotic cone of a neck do not match."""


class DeltaNotFound(NumericalError):
    """No t-window satisfies the gluing bound |xi^t| < zeta*r."""


class WindowViolation(ValidationError):
    """Interpolation window t*T < t^tau < 2 t^tau < R' violated."""


class NoAdmissibleTau(ValidationError):
    """The admissible interpolation-exponent window is empty."""


class HarmonicsMissing(ValidationError):
    """Bounded-harmonic data required for the subspace basis is absent."""


# -- solvers ------------------------------------------------------------------

class EigenFail(NumericalError):
    """Eigenvalue iteration stagnated."""


class InsufficientSpectrum(NumericalError):
    """Computed spectrum too short to certify an exponent interval."""


class RangeTooShort(ValidationError):
    """Radial chart does not span enough decades for a decay fit."""


class DecayNotResolved(NumericalError):
    """Truncation radius too small to resolve the interior decay rate."""


class SolveFail(NumericalError):
    """Linear solve stagnated; condition estimate attached."""


class NotMeanZero(ValidationError):
    """Right-hand side is not mean-zero within tolerance."""


class SingularGram(NumericalError):
    """Gram matrix of the projection basis is numerically singular."""


class LedgerViolation(NumericalError):
    """Iteration left the contraction regime (norm gates failed)."""
