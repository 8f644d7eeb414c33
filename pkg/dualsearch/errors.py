class DualSearchError(Exception):
    """Base class for every error raised by the dual search package."""


class ConfigError(DualSearchError, ValueError):
    pass


class ArtifactError(DualSearchError, ValueError):
    """A search artifact (architecture, loss weights, checkpoint) is missing or unreadable."""


class MissingFile(DualSearchError, FileNotFoundError):
    pass


class MalformedManifest(DualSearchError, ValueError):
    def __init__(self, message: str, row: int = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DuplicateId(DualSearchError, ValueError):
    pass


class DecodeError(DualSearchError, ValueError):
    pass


class DimensionMismatch(DualSearchError, ValueError):
    pass


class CropTooLarge(DualSearchError, ValueError):
    pass


class EmptyPool(DualSearchError, ValueError):
    pass


class ShapeMismatch(DualSearchError, ValueError):
    pass


class ImageTooSmall(DualSearchError, ValueError):
    pass


class NotColorImage(DualSearchError, ValueError):
    pass


class ConstantImage(DualSearchError, ValueError):
    pass


class EmptyNegatives(DualSearchError, ValueError):
    pass


class NoEvaluableCandidates(DualSearchError, ValueError):
    pass


class ExtractorUnavailable(DualSearchError, RuntimeError):
    pass


class NonFiniteLoss(DualSearchError, RuntimeError):
    def __init__(self, message: str, step: int = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
