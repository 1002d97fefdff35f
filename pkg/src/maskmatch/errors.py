"""Exception hierarchy shared across the package.

Everything raised on purpose derives from MaskMatchError so callers (and the
CLI exit-code mapping) can distinguish data/domain failures from bugs.
"""


class MaskMatchError(Exception):
    """Base class for all errors raised by maskmatch."""


class DimensionMismatch(MaskMatchError):
    """Operands do not share the same raster dimensions."""


class MalformedRle(MaskMatchError):
    """A run-length encoding violates its invariants."""


class InfeasibleConstraints(MaskMatchError):
    """No assignment can satisfy the RoI-count bounds."""


class TooLarge(MaskMatchError):
    """Instance exceeds the hard size cap of the brute-force oracle."""


class GenerationFailed(MaskMatchError):
    """Synthetic generator could not satisfy its coverage invariant."""


class PreconditionUnmet(MaskMatchError):
    """A checker's stated precondition does not hold for the input."""


class EmptyInput(MaskMatchError):
    """An operation requiring at least one sample received none."""


class DegenerateClass(MaskMatchError):
    """A class has no labeled pixels to learn from."""


class NoLabeledData(MaskMatchError):
    """A training round was started without any human-labeled sample."""


class UnknownImage(MaskMatchError):
    """An image id is missing from, or duplicated in, the expected pool."""


class ContractViolation(MaskMatchError):
    """A pluggable model broke the prediction contract."""


class MalformedRaster(MaskMatchError):
    """A raster container file failed validation; message carries the byte offset."""


class MalformedProposal(MaskMatchError):
    """A proposal document failed validation; message names the field or proposal id."""


class MalformedManifest(MaskMatchError):
    """A dataset manifest failed validation; message names the field path."""


class MalformedAnnotation(MaskMatchError):
    """An annotation document failed validation."""


class MalformedRecord(MaskMatchError):
    """A persisted assignment/round/state record failed validation."""


class RunLocked(MaskMatchError):
    """Another loop already holds the run directory lock."""
