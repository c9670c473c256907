"""Exception types shared across the package.

Every error raised by library code derives from NesVaeError so the CLI can
map failures to a single machine-parseable line and exit code 1.
"""


class NesVaeError(Exception):
    """Base class for all library errors."""

    code = "error"

    def one_line(self) -> str:
        return f"error: {self.code}: {self}"


class DimensionError(NesVaeError):
    """Shape or length mismatch between arrays and declared widths."""

    code = "dimension"


class ConfigError(NesVaeError):
    """Invalid or inconsistent configuration values."""

    code = "config"


class NoSpanningTreeError(NesVaeError):
    """The graph has no spanning tree (disconnected input)."""

    code = "no-spanning-tree"


class NoArborescenceError(NesVaeError):
    """No arborescence exists (some vertex unreachable from the root)."""

    code = "no-arborescence"


class EmptyInputError(NesVaeError):
    """An operation received an empty instance where one is not allowed."""

    code = "empty-input"


class EnumerationCapError(NesVaeError):
    """The structure family is too large to enumerate exhaustively."""

    code = "enumeration-cap"


class UnsupportedFamilyError(NesVaeError):
    """Counting or solving is not implemented for this family/instance."""

    code = "unsupported-family"


class InvalidStructureError(NesVaeError):
    """A structure indicator violates its family's validity predicate."""

    code = "invalid-structure"


class NonFiniteFitnessError(NesVaeError):
    """An objective evaluation returned NaN or infinity."""

    code = "non-finite-fitness"

    def __init__(self, message: str, index: int | None = None,
                 iteration: int | None = None):
        super().__init__(message)
        self.index = index
        self.iteration = iteration


class TheoryMismatchError(NesVaeError):
    """A diagnostic was asked to certify a run its assumptions exclude."""

    code = "theory-mismatch"


class DatasetFormatError(NesVaeError):
    """Dataset file is corrupt or has an unsupported version."""

    code = "dataset-format"


class CheckpointFormatError(NesVaeError):
    """Checkpoint file is corrupt or has an unsupported version."""

    code = "checkpoint-format"
