"""Exception types shared across the package."""


class TextProxyError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(TextProxyError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyInput(TextProxyError):
    """An operand is empty where at least one element is required."""


class ZeroVector(TextProxyError):
    """A vector with (near-)zero norm was passed where a direction is needed."""


class NonFiniteData(TextProxyError):
    """NaN or Inf encountered where only finite values are admitted."""


class DegenerateDirector(TextProxyError):
    """The director vector collapsed below the resolvable threshold.

    Signals that delta * t_q nearly cancels eta * d_l, leaving the proxy
    direction undefined.  ``pair`` carries (text_index, video_index) when
    the failure occurred inside a batched grid computation.
    """

    def __init__(self, message: str, pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.pair = pair


class NonSquareBatch(TextProxyError):
    """Training grids require an equal number of texts and videos."""


class NonPositiveTemperature(TextProxyError):
    """The softmax temperature must be strictly positive."""


class BatchTooSmall(TextProxyError):
    """Contrastive batches need at least two elements."""


class InvalidConfig(TextProxyError):
    """A configuration value violates a documented precondition."""


class MissingGroundTruth(TextProxyError):
    """A query lacks a usable ground-truth assignment."""


class TensorFormatError(TextProxyError):
    """Base class for tensor-container parsing failures."""


class BadMagic(TensorFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersion(TensorFormatError):
    """The container version or element dtype is not supported."""


class TruncatedPayload(TensorFormatError):
    """The payload size disagrees with the dimensions in the header."""
