"""Exception types raised across the package."""


class CleanseError(ValueError):
    """Base class for all input/contract violations."""


class FormatError(CleanseError):
    """An input file does not conform to its declared format."""


class LabelError(CleanseError):
    """Label assignments do not cover the embedding set exactly."""


class ModalityError(CleanseError):
    """Modalities are missing or their sample ids disagree."""
