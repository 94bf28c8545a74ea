"""Exception hierarchy shared across the package."""


class FaceSynthError(Exception):
    """Base class for all package-specific errors."""


class FormatError(FaceSynthError):
    """A file does not conform to its documented format (bad magic, truncation, parse error)."""


class CorpusError(FaceSynthError):
    """A corpus violates a structural requirement (missing neutral entry, mismatched topology)."""


class NumericalError(FaceSynthError):
    """A numerical procedure failed (non-finite energy, singular system)."""
