"""Exception types shared across the package.

The split matters for the command line tool: `DataError` maps to exit code 2
(bad input, bad config), `CheckpointError` to exit code 3 (incompatible or
corrupted state), anything else to 1.
"""


class DataError(ValueError):
    """Invalid user input: data, schema, or configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint is missing, corrupted, or incompatible with the data."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradients; the failing step was not applied."""
