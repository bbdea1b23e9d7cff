"""Exception types shared across modules, mapped to CLI exit codes."""


class ConfigurationError(ValueError):
    """Invalid parameters or flag combinations."""


class ParseError(ValueError):
    """Malformed dataset or artifact file; message names file and line."""


class IncompatibleArtifactsError(ValueError):
    """Checkpoint and dataset disagree (dimension, vocabulary, levels)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        super().__init__(message or f"non-finite loss at step {step}")
        self.step = step
