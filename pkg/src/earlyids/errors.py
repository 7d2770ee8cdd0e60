"""Exception hierarchy. Each class carries the CLI exit code for its family."""


class EarlyIDSError(Exception):
    exit_code = 1


class ConfigError(EarlyIDSError, ValueError):
    exit_code = 2


class ContractError(ConfigError):
    """A caller broke a documented precondition (shape, kind, ...)."""


class DataError(EarlyIDSError, ValueError):
    exit_code = 3


class StratificationError(DataError):
    pass


class TrainingDivergedError(EarlyIDSError, FloatingPointError):
    exit_code = 4


class FormatError(EarlyIDSError, IOError):
    exit_code = 5


class IntegrityError(FormatError):
    pass
