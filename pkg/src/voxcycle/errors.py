"""Exception types shared across the package.

The CLI maps ValidationError (and subclasses) to exit code 2 and any
other PipelineError / unexpected exception to exit code 1.
"""


class PipelineError(Exception):
    """Runtime failure inside the pipeline."""


class ValidationError(PipelineError):
    """Violated precondition, invariant, or configuration rule."""


class ShapeError(ValidationError):
    """Array shape incompatible with an operation's contract."""


class NiftiFormatError(ValidationError):
    """File is not a readable NIfTI-1 volume."""
