"""Exception types shared across the package."""


class JointMheError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(JointMheError, ValueError):
    """An argument has the wrong shape or length."""


class NumericOverflowError(JointMheError):
    """A non-finite value was produced during simulation.

    Carries the time index at which the overflow occurred.
    """

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"non-finite value produced at time index {t}")


class InvalidCertificateError(JointMheError):
    """A certificate violates a structural requirement (e.g. P not PD)."""


class CertificateDegenerateError(JointMheError):
    """The certificate constants cannot yield a contraction rate below one."""


class NotApplicableError(JointMheError):
    """The requested construction does not apply to this model."""


class SynthesisFailedError(JointMheError):
    """No admissible gain was found within the search budget."""


class InsufficientHistoryError(JointMheError):
    """An operation needs more recorded samples than are available."""


class ContractViolationError(JointMheError):
    """An operation was called out of its required order."""
