"""Exception hierarchy shared across the package."""


class DmsegError(Exception):
    """Base class for every error raised by dmseg."""


class InvalidArgumentError(DmsegError, ValueError):
    pass


class ShapeError(InvalidArgumentError):
    pass


class NoBoundaryError(DmsegError):
    """The requested class has no boundary voxels (absent, or it fills the image)."""


class UnsupportedVariantError(InvalidArgumentError):
    pass


class StateError(DmsegError, RuntimeError):
    pass


class TrainingDivergedError(DmsegError, FloatingPointError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
