"""Exception classes shared across the package.

Every error that stems from user-supplied data carries ``exit_code = 2`` so
the CLI can map it to the documented exit status; anything else is treated
as an internal error (exit 3).
"""


class EudError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConlluParseError(EudError):
    """Malformed CoNLL-U input; message names the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ReservedSymbolError(EudError):
    """An input label contains a separator character reserved by a transform."""


class LabelFormatError(EudError):
    """A composite label cannot be decomposed (empty segment, too many levels)."""


class StructureError(EudError):
    """A graph violates a structural precondition (e.g. orphan empty node)."""


class AlignmentError(EudError):
    """Gold and predicted corpora do not align sentence-by-sentence."""


class ModelFormatError(EudError):
    """A model file is missing, truncated, or has an unknown version."""


class VocabularyError(EudError):
    """A gold label is absent from the model's label inventory."""


class NonFiniteGradientError(EudError):
    """Training produced a NaN or infinite gradient."""

    exit_code = 3
