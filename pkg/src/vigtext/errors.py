"""Error types shared across the package.

The CLI maps these onto exit codes: DataError -> 2, ProviderError -> 3,
NumericError -> 4. Usage errors are handled by the argument parser.
"""


class VigtextError(Exception):
    pass


class DataError(VigtextError):
    """Malformed or missing input data."""


class ImageError(DataError):
    pass


class MissingImageError(ImageError):
    pass


class MalformedHeaderError(ImageError):
    pass


class UnsupportedDepthError(ImageError):
    pass


class TruncatedImageError(ImageError):
    pass


class ManifestError(DataError):
    pass


class FixtureFormatError(DataError):
    pass


class FixtureMissError(DataError):
    """Lookup digest absent from a fixture file."""


class GraphSchemaError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ProviderError(VigtextError):
    """Embedding or parsing backend failed."""


class TransportError(ProviderError):
    def __init__(self, message, attempts=None):
        super().__init__(message)
        self.attempts = attempts


class NumericError(VigtextError):
    """Training or attack optimisation diverged."""
