"""Exception hierarchy for maskdiff."""


class MaskDiffError(Exception):
    """Base class for all library errors."""


class InvalidInputError(MaskDiffError, ValueError):
    pass


class OutOfRangeError(InvalidInputError, IndexError):
    pass


class UndefinedStepError(MaskDiffError, ValueError):
    pass


class DegenerateEvidenceError(MaskDiffError, ValueError):
    """Every template is ruled out by the revealed tokens."""


class DegenerateFeatureError(MaskDiffError, ValueError):
    pass


class InvalidStateError(MaskDiffError, RuntimeError):
    pass


class ScheduleViolationError(MaskDiffError, RuntimeError):
    pass


class InvariantViolationError(MaskDiffError, RuntimeError):
    pass


class SizeGuardError(MaskDiffError, ValueError):
    """Enumeration requested on an instance larger than the guard allows."""


class ConfigError(MaskDiffError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
