"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError (and subclasses) -> 2, NumericError / ShapeError -> 3.
"""

from __future__ import annotations


class MetaShopError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MetaShopError):
    """Invalid configuration value or inconsistent option combination."""


class DataError(MetaShopError):
    """Malformed, missing, or semantically invalid input data."""


class OutOfVocabularyError(DataError):
    """A categorical value has no row in the relevant embedding table."""


class SamplingError(DataError):
    """A negative-sampling pool is empty or exhausted for some item."""


class ColdUserError(DataError):
    """A user has no purchase history to build a representation from."""


class EmptyBatchError(DataError):
    """A loss or gradient was requested on a batch with no records."""


class NumericError(MetaShopError):
    """A non-finite value appeared where a finite one is required."""


class ShapeError(MetaShopError):
    """Array shapes are inconsistent with the declared architecture."""
