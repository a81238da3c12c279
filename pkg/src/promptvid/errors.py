"""Exception hierarchy shared by every subsystem.

The CLI maps each family onto an exit code, so new errors should subclass
one of the three families below rather than ``PromptVidError`` directly.
"""


class PromptVidError(Exception):
    exit_code = 1


# -- configuration family (exit code 2) --------------------------------------


class ConfigError(PromptVidError):
    exit_code = 2


class PlanError(ConfigError):
    pass


class VersionError(ConfigError):
    """Checkpoint or file written by an incompatible configuration/format."""


# -- data family (exit code 3) -----------------------------------------------


class DataError(PromptVidError):
    exit_code = 3


class StateError(DataError):
    """An object was used before the state it needs was loaded or built."""


class ParseError(DataError):
    pass


class ExtractionError(DataError):
    pass


class SplitError(DataError):
    pass


class VocabularyError(DataError):
    pass


class SpanError(DataError):
    pass


# -- numeric family (exit code 4) --------------------------------------------


class NumericError(PromptVidError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class ContractError(NumericError, ValueError):
    pass


class NonFiniteError(NumericError, FloatingPointError):
    pass


class ScheduleError(NumericError, IndexError):
    pass


class MetricError(NumericError):
    pass
