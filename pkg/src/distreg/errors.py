"""Exception types shared across the package."""


class DistregError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(DistregError):
    """Weighted covariance is rank deficient (collinear or coincident points)."""


class EmptyInput(DistregError):
    pass


class EmptyCorrespondences(DistregError):
    pass


class ArityMismatch(DistregError):
    pass


class CoincidentPoint(DistregError):
    pass


class OutOfRange(DistregError):
    pass


class SequenceTooShort(DistregError):
    pass


class NoPairInRange(DistregError):
    pass


class MalformedFile(DistregError):
    def __init__(self, path, offset, reason=""):
        self.path = str(path)
        self.offset = offset
        msg = f"{self.path}: malformed at byte offset {offset}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class ShapeMismatch(DistregError):
    pass


class SingleCandidate(DistregError):
    pass


class InsufficientData(DistregError):
    pass


class AllFiltered(DistregError):
    pass


class TooFewCorrespondences(DistregError):
    pass


class RegistrationFailed(DistregError):
    pass


class SkipPair(DistregError):
    """A training pair produced no usable labels; the caller skips it."""

    def __init__(self, reason, stage=None):
        self.stage = stage
        super().__init__(reason)


class ConfigError(DistregError):
    pass
