"""Exception hierarchy shared by all refilter modules.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class RefilterError(Exception):
    """Base class for all refilter errors."""


class DimensionError(RefilterError):
    """Tensor or pool shapes do not line up."""


class ConfigError(RefilterError):
    """A configuration value is out of its legal range."""


class DataError(RefilterError):
    """Corpus, dataset, or noise-pool contents violate the schema."""


class TrainingError(RefilterError):
    """The training loop hit an unrecoverable state (missing grads, NaN loss)."""


class NumericsError(RefilterError):
    """A numeric check failed (non-finite loss, bad backward call)."""


class CacheError(RefilterError):
    """The feature cache is corrupt or unusable."""


class CheckpointError(RefilterError):
    """Checkpoint file is missing, incompatible, or malformed."""
