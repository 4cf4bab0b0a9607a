"""Exception types shared across the package."""


class VampVaeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VampVaeError):
    """Operand shapes do not conform to an operation's rule."""


class NumericError(VampVaeError):
    """An operation produced a non-finite value."""


class ContractError(VampVaeError):
    """A caller violated a documented precondition."""


class DomainError(VampVaeError):
    """Input data lies outside the operation's domain."""


class FormatError(VampVaeError):
    """A file does not match its wire format.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
