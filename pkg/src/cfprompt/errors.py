"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its documented domain."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite value.

    The message names the node (operation, timestep or pipeline stage) where
    the first non-finite value appeared.
    """


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact required by a CLI subcommand does not exist."""
