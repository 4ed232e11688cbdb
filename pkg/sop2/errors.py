"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI returns for it.
"""


class Sop2Error(Exception):
    """Base class for all errors raised by sop2."""

    exit_code: int = 3


class UsageError(Sop2Error):
    exit_code = 2


class DimensionError(Sop2Error, ValueError):
    """Tensor shapes do not agree."""


class ContractError(Sop2Error):
    """An operation was called outside its preconditions."""


class EmptySetError(Sop2Error, ValueError):
    """A masked reduction was asked to reduce over zero rows."""


class ConfigurationError(Sop2Error, ValueError):
    pass


class WiringError(Sop2Error):
    """Prompt mechanism attached to the wrong partition or prompt count mismatch."""


class GenerationError(Sop2Error):
    pass


class CheckpointError(Sop2Error):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(
            "checkpoint config does not match\n"
            f"--- expected ---\n{expected}\n--- found in checkpoint ---\n{found}"
        )


class NumericalError(Sop2Error):
    exit_code = 4

    def __init__(self, tensor_name: str, detail: str = "non-finite values"):
        self.tensor_name = tensor_name
        super().__init__(f"{detail} in tensor '{tensor_name}'")
