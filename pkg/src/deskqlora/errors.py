"""Exception hierarchy shared by every deskqlora module."""


class DeskQLoraError(Exception):
    """Base class for all library errors."""


class DimensionError(DeskQLoraError, ValueError):
    pass


class FrozenParameterError(DeskQLoraError):
    pass


class DomainError(DeskQLoraError, ValueError):
    pass


class FormatError(DeskQLoraError, ValueError):
    pass


class RankError(DeskQLoraError, ValueError):
    pass


class ConfigError(DeskQLoraError, ValueError):
    pass


class VocabularyError(DeskQLoraError, ValueError):
    pass


class OptimizerError(DeskQLoraError):
    pass


class ProtocolError(DeskQLoraError):
    pass


class ShardingError(DeskQLoraError, ValueError):
    pass


class SynchronizationError(DeskQLoraError):
    pass


class PartitionError(DeskQLoraError, ValueError):
    pass


class ParseError(DeskQLoraError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    pass


class LabelError(DeskQLoraError, ValueError):
    pass


class InputError(DeskQLoraError, ValueError):
    pass
