"""Exception hierarchy. The CLI maps these onto exit codes."""


class GanlabError(Exception):
    pass


class ShapeError(GanlabError, ValueError):
    pass


class DegenerateBatchError(ShapeError):
    pass


class ParameterError(GanlabError, ValueError):
    pass


class ConfigError(GanlabError, ValueError):
    pass


class BuildError(ConfigError):
    pass


class FormatError(GanlabError, ValueError):
    pass


class CorruptCheckpointError(FormatError):
    pass


class StateError(GanlabError, RuntimeError):
    pass


class NumericError(GanlabError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
