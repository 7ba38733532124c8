"""
Exception hierarchy for the indelphy toolkit.

Every error raised on purpose by the library derives from IndelPhyError so the
CLI can map it to an exit code in one place.
"""

from typing import Iterable, Optional


class IndelPhyError(Exception):
    """Base class for all toolkit errors."""


class ParameterDomainError(IndelPhyError, ValueError):
    """Raised when edge mutation parameters leave the valid domain."""


class UnknownNodeError(IndelPhyError, KeyError):
    """Raised when a node id is not part of the tree."""

    def __init__(self, node):
        super().__init__(f"unknown node id {node!r}")
        self.node = node

    def __str__(self):
        return self.args[0]


class InsufficientLengthError(IndelPhyError, ValueError):
    """Raised when a bitstring is too short for the requested block."""

    def __init__(self, message: str, shortfall: int):
        super().__init__(f"insufficient length: {message} (short by {shortfall} bits)")
        self.shortfall = shortfall


class BlockSchemeError(IndelPhyError, ValueError):
    """Raised when k/zeta cannot produce at least two blocks."""


class LineageMissingError(IndelPhyError):
    """Raised when a lineage-only operation runs on an untracked assignment."""


class EstimatorError(IndelPhyError, ValueError):
    """Raised for malformed estimator inputs (block mismatch, missing distances, ...)."""


class ReconstructionError(IndelPhyError):
    """Base class for reconstruction failures of a single trial."""


class ReconstructionStall(ReconstructionError):
    """No cherry could be identified at a level with more than three roots."""

    def __init__(self, level: int, remaining: int, reason: str = "no cherry", decision_log: Iterable[str] = ()):
        super().__init__(f"stalled at level h={level} with {remaining} roots: {reason}")
        self.level = level
        self.remaining = remaining
        self.reason = reason
        self.decision_log = list(decision_log)


class DegenerateSequencesError(ReconstructionError):
    """One or more leaves are too short for the configured block scheme."""

    def __init__(self, labels: Iterable[str]):
        self.labels = sorted(labels)
        preview = ", ".join(self.labels[:5])
        more = "" if len(self.labels) <= 5 else f" (+{len(self.labels) - 5} more)"
        super().__init__(f"degenerate leaf sequences: {preview}{more}")


class InsufficientLeavesError(ReconstructionError):
    """Fewer than four leaves were supplied."""


class LeafSetMismatchError(IndelPhyError, ValueError):
    """Two trees do not share the same leaf label set."""


class SequenceFormatError(IndelPhyError, ValueError):
    """A sequence, lineage or tree-parameter file could not be parsed."""

    def __init__(self, path: str, line_no: Optional[int], message: str):
        where = f"{path}:{line_no}" if line_no is not None else path
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line_no = line_no


class ConfigError(IndelPhyError, ValueError):
    """Invalid experiment configuration."""


class ConfigHashMismatch(ConfigError):
    """An output directory already belongs to a different configuration."""


class ResultStoreError(IndelPhyError):
    """The per-trial result store could not be read or written."""
