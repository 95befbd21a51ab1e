"""Exception hierarchy shared across the package.

The CLI maps :class:`InputError` subclasses to exit code 2 and
:class:`RunAbort` to exit code 3.
"""


class InputError(ValueError):
    """Invalid input: bad shapes, bad configuration, bad file contents."""


class FormatError(InputError):
    """A file does not follow the expected binary layout."""


class ShapeError(InputError):
    pass


class DomainError(InputError):
    """A scalar argument lies outside the domain of a function."""


class ConfigError(InputError):
    pass


class ContractError(InputError):
    """A caller broke a documented calling convention."""


class SingularityError(ArithmeticError):
    pass


class TruncatedFileError(OSError):
    pass


class RunAbort(RuntimeError):
    """A long-running job hit a non-recoverable numerical state."""

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
