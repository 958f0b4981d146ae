"""Exception hierarchy shared across the engine.

Exit-code mapping used by the CLI: ConfigError -> 2, ProviderError -> 3,
DataError (and subclasses) -> 4.
"""


class PrismError(Exception):
    """Base class for all engine errors."""


class ConfigError(PrismError):
    """Invalid run configuration or spec file."""


class ProviderError(PrismError):
    """A model provider failed (unreachable endpoint, timeout, bad response)."""


class DataError(PrismError):
    """Invalid or inconsistent input data."""


class ManifestError(DataError):
    """Catalog manifest failed to parse or validate."""


class StoreFormatError(DataError):
    """Embedding store file is corrupt or has the wrong format."""


class MissingEmbeddingError(DataError):
    """An image_id required for similarity scoring is absent from the store."""


class EmptyClassError(DataError):
    """Class-filter candidate selection matched no products."""


class NoMatchesError(DataError):
    """Mask-ratio diagnostic requested on a pair with zero correspondences."""
