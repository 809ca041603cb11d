"""Exception hierarchy shared across the package."""


class FacewatchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FacewatchError):
    """Invalid configuration value or combination."""


class ManifestError(FacewatchError):
    """Malformed stream manifest; carries the offending line index."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class StreamError(FacewatchError):
    """Failure while reading a stream entry (e.g. missing image file)."""


class DetectionError(FacewatchError):
    """A face detector plug-in failed; carries the frame index."""

    def __init__(self, message: str, frame_index: int):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


class EmbeddingError(FacewatchError):
    """Face embedding failure (empty input, plug-in fault)."""


class DimensionMismatchError(FacewatchError):
    """Vector dimension does not match the configured dimension."""


class RegistryError(FacewatchError):
    """Invalid face-registry operation or persisted document."""


class ScoringError(FacewatchError):
    """Risk scorer misconfiguration or failure."""


class MissingScoreError(ScoringError):
    """A file-backed scorer has no entry for the requested key."""


class StoreError(FacewatchError):
    """Persistence failure or rejected write in a sample/profile store."""


class DivergenceUndefinedError(FacewatchError):
    """KL divergence undefined: unsmoothed Q is zero where P has mass."""


class NotFoundError(FacewatchError):
    """Requested subject or document does not exist."""


class TemplateError(FacewatchError):
    """Report template references an unknown placeholder."""


class TransportError(FacewatchError):
    """LLM endpoint unreachable, timed out, or returned non-2xx after retries."""


class ProtocolError(FacewatchError):
    """LLM endpoint returned a body that does not match the wire contract."""


class NumericsError(FacewatchError):
    """Numerical-core failure (zero-vector normalization, non-finite values)."""
