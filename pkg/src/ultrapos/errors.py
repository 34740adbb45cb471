"""Exception hierarchy shared by every stage of the pipeline."""


class UltraposError(Exception):
    """Base class for all package errors."""


class ConfigError(UltraposError, ValueError):
    """Invalid scenario, schedule or detector configuration."""


class NyquistError(ConfigError):
    """A waveform's band does not fit below half the sampling rate."""


class RateMismatchError(UltraposError, ValueError):
    pass


class DetectionError(UltraposError):
    """Raised when the receiver cannot find what it needs in the audio."""


class NoPeakError(DetectionError):
    """No correlation peak above threshold (e.g. the chirp beacon is absent)."""


class InsufficientDataError(DetectionError):
    pass


class InsufficientAnchorsError(UltraposError, ValueError):
    pass


class DegenerateGeometryError(UltraposError, ValueError):
    pass
