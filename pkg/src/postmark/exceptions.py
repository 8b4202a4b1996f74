"""Exception hierarchy.

Every error raised on purpose by the package derives from ``PostMarkError``.
The CLI maps the three families below onto exit codes 2, 3 and 4.
"""


class PostMarkError(Exception):
    """Base class for all package errors."""


class InputError(PostMarkError, ValueError):
    """Malformed or empty user input (exit code 2)."""


class KeyMaterialError(PostMarkError):
    """Problems with the secret table: fingerprint, checksum, version (exit code 3)."""


class BackendError(PostMarkError):
    """An embedding or instruction backend failed (exit code 4)."""


class EmptyTextError(InputError):
    pass


class MalformedLineError(InputError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EmptyVocabularyError(InputError):
    pass


class InsufficientSnippetsError(InputError):
    pass


class InsufficientSamplesError(InputError):
    pass


class FingerprintMismatchError(KeyMaterialError):
    pass


class ChecksumError(KeyMaterialError):
    pass


class FormatVersionError(KeyMaterialError):
    pass


class TruncatedFileError(KeyMaterialError):
    pass


class TransportError(BackendError):
    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class EmptyResponseError(BackendError):
    pass


class DimensionMismatchError(BackendError):
    pass


class BatchEmbeddingError(PostMarkError):
    """Wraps a per-item embedding failure with the index of the failing text."""

    def __init__(self, index, cause):
        super().__init__(f"embedding failed for batch item {index}: {cause}")
        self.index = index
        self.cause = cause


class DestructiveRewriteError(BackendError):
    pass
