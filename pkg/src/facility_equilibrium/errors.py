"""Exception hierarchy shared by all solver modules."""


class FacilityEquilibriumError(Exception):
    """Base class for every error raised by this package."""


class ParseError(FacilityEquilibriumError):
    """Malformed input text. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(FacilityEquilibriumError):
    """Input is well formed but violates a structural requirement."""


class DomainError(FacilityEquilibriumError, ValueError):
    """An argument lies outside the domain of an operation."""


class InfeasibleError(FacilityEquilibriumError):
    """The requested problem has no feasible point."""
