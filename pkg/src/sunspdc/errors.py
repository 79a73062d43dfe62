"""Exception hierarchy shared by all modules."""


class SunSpdcError(Exception):
    pass


class InvalidArgumentError(SunSpdcError, ValueError):
    pass


class PreconditionViolation(SunSpdcError, ValueError):
    """An input object violates the invariants the operation relies on."""


class OutOfDomainError(SunSpdcError, ValueError):
    pass


class InsufficientDataError(SunSpdcError):
    """Not enough counts/bins/records to produce an estimate."""


class DegenerateBasisError(SunSpdcError, ValueError):
    pass


class ParseError(SunSpdcError, ValueError):
    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.offset = offset
        self.path = path


class ConfigError(SunSpdcError, ValueError):
    """Configuration validation failure; ``field`` is a dotted path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
