"""Exception hierarchy. The CLI maps each family to an exit code."""


class CausalProbeError(Exception):
    exit_code = 3


class ContractError(CausalProbeError, ValueError):
    """A documented precondition or invariant was violated."""


class DimensionError(ContractError):
    pass


class RangeError(ContractError, IndexError):
    pass


class SpecError(ContractError):
    """Invalid network specification."""


class TrainingError(CausalProbeError, ArithmeticError):
    pass


class FormatError(CausalProbeError):
    """Malformed binary file (IDX, tensor blob, checkpoint)."""

    exit_code = 4


class ConfigError(CausalProbeError):
    exit_code = 2


class OutputError(CausalProbeError, OSError):
    """Artifact could not be written."""

    exit_code = 4


class MissingArtifactError(CausalProbeError, FileNotFoundError):
    """A file an earlier pipeline step should have produced is absent."""

    exit_code = 4
