"""Exception types raised by hdp-lab.

Every error derives from `HDPError`. Errors about bad values or shapes also derive
from `ValueError`, so callers that already catch `ValueError` keep working.
"""


class HDPError(Exception):
    """Base class for all hdp-lab errors."""


class ShapeMismatch(HDPError, ValueError):
    """Array or batch shape does not match the declared shape."""


class LengthMismatch(HDPError, ValueError):
    """Paired arrays have different lengths."""


class EmptyBatch(HDPError, ValueError):
    """An operation that averages over samples received none."""


class NonFinite(HDPError, ValueError):
    """A loss component or parameter is NaN or infinite."""


class NonFiniteGradient(HDPError, ValueError):
    """A perturbation gradient contains NaN or infinite entries."""


class MissingDonor(HDPError, ValueError):
    """A BLEND manipulation was requested without a donor image."""


class EmptySubset(HDPError, ValueError):
    """UAP generation received no real images."""


class EmptyStage(HDPError, ValueError):
    """A stage has no training samples."""


class EmptyPool(HDPError, ValueError):
    """HDP replay was requested but the UAP pool is empty."""


class KTooLarge(HDPError, ValueError):
    """Requested buffer size exceeds what the stage can supply."""


class SingleClass(HDPError, ValueError):
    """AUC needs at least one positive and one negative label."""


class IncompleteMatrix(HDPError, ValueError):
    """An evaluation matrix lacks entries needed by a summary metric."""


class PoolOrderError(HDPError, ValueError):
    """UAP pool stage ids must be strictly increasing without gaps."""


class DuplicateStage(PoolOrderError):
    """A perturbation for this stage (or a later one) is already pooled."""


class CorruptFile(HDPError):
    """A binary file has a wrong magic, a truncated body or a bad index."""


class VersionMismatch(HDPError):
    """A binary file was written with an unsupported format version."""


class IOFailure(HDPError, OSError):
    """Writing an output file failed."""
