"""Exception hierarchy shared across the package."""


class PanelModelError(Exception):
    """Base class for all package errors."""


class DomainError(PanelModelError, ValueError):
    """An outcome or parameter is outside the family's support."""


class ContractError(PanelModelError, ValueError):
    """A call violates an operation's precondition."""


class ValidationError(PanelModelError, ValueError):
    """A configuration combines incompatible pieces (family vs. correction, etc.)."""


class DegeneratePanelError(PanelModelError, ArithmeticError):
    """A denominator or curvature block degenerated; names the unit/period."""

    def __init__(self, message, unit=None, period=None):
        super().__init__(message)
        self.unit = unit
        self.period = period


class LinearAlgebraError(PanelModelError, ArithmeticError):
    """A linear solve failed; carries the condition number when known."""

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class ParseError(PanelModelError, ValueError):
    """Malformed input file; carries row/column position."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DumpFormatError(PanelModelError, ValueError):
    """Malformed chain dump; carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
