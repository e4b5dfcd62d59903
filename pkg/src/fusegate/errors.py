"""Exception taxonomy shared by every module.

All failures surface as one of these; the CLI maps them onto exit codes
(config -> 2, missing input -> 3, verification -> 1).
"""


class FusegateError(Exception):
    """Base class for all package errors."""


class DimensionError(FusegateError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(FusegateError):
    """A documented precondition was violated by the caller."""


class NumericError(FusegateError):
    """Non-finite values or numerically invalid inputs."""


class ConfigError(FusegateError):
    """Invalid configuration (unknown key, bad value, degenerate geometry)."""


class FormatError(FusegateError):
    """A serialized file is malformed; message names the byte offset."""


class TrainingDiverged(FusegateError):
    """Loss became non-finite; message carries epoch, batch and learning rate."""
