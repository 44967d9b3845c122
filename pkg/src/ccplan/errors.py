"""Exception types raised across the package."""


class CcplanError(Exception):
    """Base class for all package errors."""


class DomainError(CcplanError, ValueError):
    """An argument lies outside the domain of a function."""


class DegenerateSamplesError(CcplanError, ValueError):
    """Sample covariance is not positive definite."""


class DegenerateDofError(CcplanError, ValueError):
    """Too few degrees of freedom for the requested quantity."""


class RiskDomainError(CcplanError, ValueError):
    """A per-constraint risk is outside (0, 0.5)."""


class CertificateError(CcplanError, ValueError):
    """A big-M certificate cannot be built for the given state box."""


class CoverageError(CcplanError, ValueError):
    """A sample set does not cover the requested time window."""


class NodeLimitError(CcplanError, RuntimeError):
    """Branch-and-bound exceeded its node limit.

    The best incumbent found so far (possibly None) is attached as
    ``incumbent``.
    """

    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


class InfeasibleError(CcplanError, RuntimeError):
    """An optimization problem has no feasible point."""


class ConfigError(CcplanError, ValueError):
    """A scenario configuration failed validation."""
