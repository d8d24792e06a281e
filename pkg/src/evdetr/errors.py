"""Exception types shared across the package.

CLI exit codes: ConfigError -> 1, MissingInputError -> 2, NumericalAbort -> 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names both."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class ParseError(ValueError):
    """Malformed input record; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    """Structurally valid input violating a domain invariant."""


class MissingInputError(FileNotFoundError):
    """A required input file or directory does not exist."""


class NoPriorFrameError(LookupError):
    """Fusion requested before any frame feature is available."""


class MissingGradError(RuntimeError):
    """Optimizer step on a parameter whose gradient was never populated."""

    def __init__(self, name: str):
        super().__init__(f"parameter {name!r} has no gradient")
        self.name = name


class NumericalAbort(RuntimeError):
    """A non-finite value surfaced where the pipeline requires finiteness."""
