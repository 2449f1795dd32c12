"""Exception types shared across the package."""


class TrajCoupleError(Exception):
    """Base class for all package-specific errors."""


class LogNearPi(TrajCoupleError):
    """Rotation log requested too close to the pi singularity."""


class DegenerateConfiguration(TrajCoupleError):
    """Point configuration too degenerate for the requested fit."""


class OutOfDomain(TrajCoupleError):
    """Pixel location outside the sampling domain of a pointmap grid."""


class UnknownBlock(TrajCoupleError):
    """Parameter block name not present in the store/tape."""


class IndexOutOfRange(TrajCoupleError):
    """Flat index outside a parameter block."""


class MissingTargets(TrajCoupleError):
    """Supervised camera-consistency loss evaluated without anchor targets."""


class ConfigInvalid(TrajCoupleError):
    """A configuration document failed validation."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"invalid config field '{field}': {message}")


class Diverged(TrajCoupleError):
    """Optimization loss exceeded the divergence bound after backtracking."""


class EmptyValidMask(TrajCoupleError):
    """Depth evaluation received no valid pixels."""


class FileFormatError(TrajCoupleError):
    """A data file does not match its documented format."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")
