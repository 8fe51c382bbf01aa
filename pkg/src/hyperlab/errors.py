"""Exception hierarchy shared by every hyperlab module.

Each class carries the process exit code the CLI maps it to.
"""


class HyperlabError(Exception):
    exit_code = 1


class InputError(HyperlabError, ValueError):
    """Bad caller-supplied data (empty sets, out-of-range ids, ...)."""

    exit_code = 2


class ConfigError(HyperlabError, ValueError):
    exit_code = 2


class ProtocolError(HyperlabError, RuntimeError):
    """A stateful API was driven out of order (decode state, context budget)."""

    exit_code = 2


class MissingArtifactError(HyperlabError, FileNotFoundError):
    exit_code = 3


class LineageError(HyperlabError):
    """A distillation stage was handed a parent checkpoint of the wrong stage."""

    exit_code = 4


class StageOrderError(LineageError, ConfigError):
    """A stage was run before its required predecessor. Also a configuration error."""

    exit_code = 4


class TrainingError(HyperlabError, RuntimeError):
    """Non-finite loss, sampler blow-up or mode collapse during a run."""

    exit_code = 5

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
