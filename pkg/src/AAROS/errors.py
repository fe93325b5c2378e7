from __future__ import annotations


class AAROSError(Exception):
    """
    Base class for every error raised deliberately by the AAROS package.
    The `exit_code` is what the command line interface returns when the error escapes a command.
    """

    exit_code: int = 1


class ConfigError(AAROSError):
    """
    A configuration value, override or split plan failed validation.
    """

    exit_code = 2


class SplitError(ConfigError):
    """
    A split plan left the train or the test split empty.
    """


class PrerequisiteError(AAROSError):
    """
    A command was started without the artifacts of the stage it depends on.
    """

    exit_code = 3


class DivergenceError(AAROSError):
    """
    Training produced a non-finite loss, ratio or objective.
    """

    exit_code = 4


class UnreachableIoUError(AAROSError, ValueError):
    """
    No horizontally shifted copy of a box inside the grid reaches the requested IoU.
    """


class SequenceTooLongError(AAROSError, ValueError):
    """
    A query or response exceeds the maximum lengths of the model configuration.
    """


class EndpointError(AAROSError):
    """
    A JSON-over-HTTP endpoint could not be reached, timed out or answered with an error status.
    """


class JudgeError(EndpointError):
    """
    The relevance judge answered with a malformed payload or an out-of-range score.
    """


class BackendError(EndpointError):
    """
    The generation backend failed or returned an empty response.
    """
