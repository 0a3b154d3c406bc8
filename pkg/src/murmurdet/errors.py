"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto exit codes: NumericsError -> 3, any other
PipelineError -> 1 (usage errors are handled by argparse and exit 2).
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PipelineError):
    """A file does not conform to its declared on-disk format."""


class UnsupportedError(PipelineError):
    """Well-formed input that this pipeline deliberately does not handle."""


class MetadataError(PipelineError):
    """Patient metadata is missing or carries an unusable value."""


class DataError(PipelineError):
    """Required data (features, predictions, labels) is missing or inconsistent."""


class PreconditionError(PipelineError):
    """A documented operation precondition was violated."""


class ShapeError(PipelineError):
    """Tensor/array dimensions do not line up."""


class StateError(PipelineError):
    """Operation called in an invalid order (e.g. backward before forward)."""


class NumericsError(PipelineError):
    """A non-finite value appeared where finite numbers are required."""
