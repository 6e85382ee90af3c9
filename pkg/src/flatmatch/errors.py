"""Exception hierarchy shared by all flatmatch modules."""


class FlatMatchError(Exception):
    pass


class ShapeError(FlatMatchError, ValueError):
    pass


class ConfigError(FlatMatchError, ValueError):
    pass


class FormatError(FlatMatchError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncationError(FormatError):
    pass


class InsufficientDataError(FlatMatchError, ValueError):
    pass


class DegenerateConfigurationError(FlatMatchError, ValueError):
    pass


class AmbiguousDecompositionError(FlatMatchError, ValueError):
    pass


class UndefinedInputError(FlatMatchError, ValueError):
    pass
