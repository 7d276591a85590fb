"""Exception hierarchy shared by every stage of the pipeline."""


class KetRagError(Exception):
    """Base class for all package errors."""


class ConfigError(KetRagError, ValueError):
    """Invalid or inconsistent configuration values."""


class TokenizerUnavailableError(KetRagError):
    """The tokenizer an index was built with cannot be constructed here."""

    def __init__(self, tokenizer_id, reason=""):
        self.tokenizer_id = tokenizer_id
        msg = f"tokenizer {tokenizer_id!r} is required but unavailable"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class IndexCorruptError(KetRagError):
    """A persisted index failed integrity checks."""


class UnsupportedVersionError(KetRagError):
    """A persisted index uses a format version this build cannot read."""


class ExtractionParseError(KetRagError):
    """Triplet extractor output could not be parsed into records."""


class GatewayError(KetRagError):
    """A remote request failed permanently."""

    def __init__(self, message, status=None, attempts=0, body_excerpt=""):
        self.status = status
        self.attempts = attempts
        self.body_excerpt = body_excerpt
        super().__init__(message)


class EmbeddingBatchError(KetRagError):
    """Embedding failed for some batches; carries the failed input indices."""

    def __init__(self, message, failed_indices):
        self.failed_indices = list(failed_indices)
        super().__init__(message)
