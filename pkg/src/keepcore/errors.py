"""Exception types shared across the package."""


class KeepCoreError(Exception):
    """Base class for every error raised by keepcore."""


class ShapeError(KeepCoreError, ValueError):
    pass


class TapeError(KeepCoreError, RuntimeError):
    pass


class NumericError(KeepCoreError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(KeepCoreError, ValueError):
    """A binary file failed to parse. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(KeepCoreError, ValueError):
    """Bad input data: manifests, labels, missing files, mismatched dims."""


class ConfigError(KeepCoreError, ValueError):
    pass
