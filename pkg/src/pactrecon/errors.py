"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""


class PactError(Exception):
    exit_code = 1


class UsageError(PactError, ValueError):
    """Invalid argument or configuration."""

    exit_code = 2


class ShapeError(UsageError):
    exit_code = 2


class FormatError(PactError):
    """Unreadable or corrupt file (IO-class failure)."""

    exit_code = 3


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class DivergenceError(PactError, ArithmeticError):
    """Non-finite iterate or loss."""

    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CompatibilityError(PactError):
    """Model / matrix / dataset built for a different geometry."""

    exit_code = 5


class FingerprintError(CompatibilityError, FormatError):
    exit_code = 5


class CoverageError(UsageError):
    """Time window too short for some pixel-detector pair."""

    exit_code = 2

    def __init__(self, message, pixel=None, detector=None):
        super().__init__(message)
        self.pixel = pixel
        self.detector = detector
