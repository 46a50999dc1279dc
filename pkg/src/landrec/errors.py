"""Exception hierarchy for the landrec engine.

Every failure mode raised by the engine derives from :class:`LandrecError`,
so callers (and the CLI) can map error classes to exit codes without
string matching.
"""


class LandrecError(Exception):
    """Base class for all engine errors."""


class ZeroNorm(LandrecError):
    """A vector with (near-)zero Euclidean norm entered a normalized operation."""


class DimMismatch(LandrecError):
    """Operands declare different vector dimensions."""


class NegativeFeature(LandrecError):
    """A feature map handed to GeM pooling contains negative values."""


class EmptyIndex(LandrecError):
    """Top-k retrieval was asked to search an empty index."""


class InvariantViolation(LandrecError):
    """A domain-type invariant does not hold (unsorted ids, duplicates, ...)."""


class BadMagic(LandrecError):
    """Embedding file does not start with the EMB1 magic."""


class BadVersion(LandrecError):
    """Embedding file declares an unsupported format version."""


class Truncated(LandrecError):
    """Embedding file payload is shorter (or longer) than its header declares."""


class NonFinite(LandrecError):
    """Loaded data contains NaN or Inf entries."""


class ParseError(LandrecError):
    """A TSV row could not be parsed; message names row and column."""


class DuplicateId(LandrecError):
    """The same image id appears twice in a table."""


class IdMismatch(LandrecError):
    """Per-model embedding sets do not contain the same id sequence."""


class EmptyCounts(LandrecError):
    """Adaptive margins require at least one class count."""


class EmptyClass(LandrecError):
    """Center fitting requires at least one labeled sample."""


class MissingCenter(LandrecError):
    """A label has no corresponding class center."""


class MissingMargin(LandrecError):
    """A label has no corresponding margin."""


class MissingLogit(LandrecError):
    """A classification model provides no logit for a landmark or image."""


class MissingDistractor(LandrecError):
    """An index image has no entry in the distractor map."""


class MissingLabel(LandrecError):
    """A retrieved index image has no landmark label."""


class UnknownQuery(LandrecError):
    """A prediction names a query id absent from the ground truth."""


class InvalidSpec(LandrecError):
    """A synthetic-data spec is out of range."""
