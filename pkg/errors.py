"""Exception types shared by every module, and their CLI exit codes."""

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class SaliencyError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_USAGE


class DimensionError(SaliencyError, ValueError):
    """A tensor does not have the shape an operation needs."""

    def __init__(self, message, axis=None):
        self.axis = axis
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(message)


class ConfigurationError(SaliencyError, ValueError):
    """A configuration value is out of range or inconsistent."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class FormatError(SaliencyError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class UsageError(SaliencyError):
    """The caller asked for something that cannot be done."""


class SampleError(SaliencyError):
    """A single dataset sample could not be decoded; callers may skip it."""

    def __init__(self, path, reason):
        self.path = path
        self.reason = reason
        super().__init__(f"cannot load sample {path}: {reason}")


class CheckFailure(SaliencyError):
    """A verification (gradient check, acceptance property) did not pass."""

    exit_code = EXIT_CHECK_FAILED
