"""Exception types shared across the simulator.

Every failure mode a caller is expected to handle has its own class so that
tests and the CLI can discriminate without string matching.
"""


class FedmergeError(Exception):
    """Base class for all simulator errors."""


class DimensionMismatch(FedmergeError, ValueError):
    """Binary vector/matrix operation received operands of unequal dimension."""


class ZeroVariance(FedmergeError, ValueError):
    """Correlation requested against a constant vector (sigma = 0)."""


class AllWeightsZero(FedmergeError, ValueError):
    """Weighted mean requested with every weight equal to zero."""


class NonFiniteLoss(FedmergeError, ArithmeticError):
    """Forward pass produced NaN/Inf loss; training has diverged."""


class EmptyTestSet(FedmergeError, ValueError):
    """Evaluation requested on an empty test set."""


class BadMagic(FedmergeError, ValueError):
    """IDX file starts with an unexpected magic number."""


class TruncatedFile(FedmergeError, ValueError):
    """IDX file ended before the declared payload was read."""


class CountMismatch(FedmergeError, ValueError):
    """Image and label IDX files declare different sample counts."""


class InfeasiblePartition(FedmergeError, ValueError):
    """Partition demands cannot be met by the available samples."""


class IndexOutOfRange(FedmergeError, IndexError):
    """Sample index outside the dataset."""


class DivergedClient(FedmergeError, ArithmeticError):
    """A client's local training produced a non-finite loss."""


class NoDeliveredUpdates(FedmergeError, RuntimeError):
    """Every client update in a round was dropped; nothing to aggregate."""


class EmptyGroup(FedmergeError, ValueError):
    """Merge requested for a group with fewer than one member."""


class PlanMismatch(FedmergeError, ValueError):
    """Merge plan indices do not form a partition of the client roster."""


class ConfigInvalid(FedmergeError, ValueError):
    """Experiment configuration failed validation."""


class DataLoadFailure(FedmergeError, RuntimeError):
    """Dataset could not be loaded."""


class IoFailure(FedmergeError, OSError):
    """Metrics or manifest file could not be written."""
