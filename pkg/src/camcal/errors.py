"""Exception types shared across the package."""


class CamcalError(Exception):
    """Base class for all camcal errors."""


class ShapeMismatchError(CamcalError):
    """Two maps that must share a shape do not."""


class DimMismatchError(CamcalError):
    """Classifier state and feature dimensions are incompatible."""


class EmptyMaskError(CamcalError):
    """Masked pooling was asked to average over zero active pixels."""


class ZeroVectorError(CamcalError):
    """Cosine similarity or a prototype received a zero-norm vector."""


class DepthTooSmallError(CamcalError):
    """Feature depth cannot hold the requested orthonormal basis."""


class InfeasibleSpecError(CamcalError):
    """A synthetic world spec asks for objects that cannot fit the image."""


class TooSmallError(CamcalError):
    """Scene is too small for the multi-scale consistency loss."""


class MismatchedClassesError(CamcalError):
    """Two reports cover different class universes."""
