"""Exception hierarchy shared by all modules."""


class IgaError(Exception):
    """Base class for library errors."""


class DomainError(IgaError, ValueError):
    """An argument lies outside the domain of an operation."""


class InvariantViolation(IgaError):
    """A structural invariant was broken by the input or by a computation."""


class ConfigurationError(IgaError, ValueError):
    """Incompatible combination of discretisation parameters."""


class GeometryError(IgaError):
    """Invalid parametrisation (e.g. nonpositive Jacobian determinant)."""


class AssemblyError(IgaError):
    """A global or local system is singular or otherwise unusable."""


class NumericalError(IgaError):
    """Factorisation or solve breakdown."""
