"""Exception types shared across the pipeline.

The CLI maps :class:`UsageError` to exit code 1 and every other
:class:`PipelineError` to exit code 2.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(PipelineError):
    """Bad flags, bad config values, missing required inputs."""


class DumpParseError(PipelineError):
    """Malformed dump XML. Carries the byte offset of the last complete row."""

    def __init__(self, message: str, *, byte_offset: int, last_row_offset: int):
        super().__init__(f"{message} (byte {byte_offset}, last complete row ended at byte {last_row_offset})")
        self.byte_offset = byte_offset
        self.last_row_offset = last_row_offset


class RowError(PipelineError):
    """A single dump row failed to parse; callers may skip and log."""

    def __init__(self, message: str, *, row_id=None):
        super().__init__(message if row_id is None else f"row {row_id}: {message}")
        self.row_id = row_id


class DuplicateIdError(PipelineError):
    """Two rows in one table share a primary id."""

    def __init__(self, table: str, row_id: int):
        super().__init__(f"duplicate id {row_id} in table {table!r}")
        self.table = table
        self.row_id = row_id


class StoreError(PipelineError):
    """Record store I/O or state errors (unsealed reads, missing files)."""


class VocabError(PipelineError):
    """Tokenizer training/usage errors (vocab too small, id out of range)."""


class ChecksumMismatchError(PipelineError):
    """Artifact was produced under a different vocabulary or is corrupt."""


class ShardError(PipelineError):
    """Token shard file is malformed or inconsistent with its index."""


class TrainingError(PipelineError):
    """Non-finite loss or otherwise unusable training state."""

    def __init__(self, message: str, *, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class MetricError(PipelineError):
    """Undefined metric value (empty classes, zero denominators)."""
