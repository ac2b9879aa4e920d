"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 1,
NumericalError/TrainingError -> 2, ResourceError -> 3.
"""


class ContraspkError(Exception):
    """Base class for all package errors."""


class ValidationError(ContraspkError):
    """Malformed inputs, configs, or contract violations detected up front."""


class TooShortError(ValidationError):
    """Signal or feature sequence shorter than one analysis unit."""


class ResourceError(ContraspkError):
    """A required external resource (noise/RIR file, corpus entry) is missing."""


class NumericalError(ContraspkError):
    """Non-finite values produced inside a forward pass or loss."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer: {layer})")
        self.layer = layer


class TrainingError(ContraspkError):
    """Unrecoverable failure during an optimization run."""
