"""Exception hierarchy shared across the package."""


class IrisHEError(Exception):
    """Base class for all package errors."""


class ImageFormatError(IrisHEError):
    """Input image is unreadable or not single-channel 8-bit."""


class SegmentationError(IrisHEError):
    """No plausible pupil/iris boundary was found.

    `candidate` holds the best (rejected) result for diagnostics.
    """

    def __init__(self, message: str, candidate=None):
        super().__init__(message)
        self.candidate = candidate


class MaskFormatError(IrisHEError):
    """External mask file is malformed or inconsistent with its image."""


class TemplateFormatError(IrisHEError):
    """Template file is malformed."""


class InsufficientOverlapError(IrisHEError):
    """Too few jointly valid bits for a meaningful Hamming distance."""


class EvaluationError(IrisHEError):
    """Database evaluation lacks genuine or impostor pairs."""


class CryptoError(IrisHEError):
    """Base class for homomorphic-encryption failures."""


class ParameterError(CryptoError):
    """Scheme parameters are malformed or cannot support the required circuit."""


class DepthLimitError(CryptoError):
    """A multiplication would exceed the supported multiplicative depth."""


class NoiseBudgetError(CryptoError):
    """Noise budget is (or would become) exhausted; decryption is unreliable."""


class KeyMismatchError(CryptoError):
    """Operands or serialized data belong to a different parameter set."""


class StoreError(IrisHEError):
    """Template store index is inconsistent or an id collides."""
