"""Exception hierarchy shared by all stages."""


class VipsegError(Exception):
    """Base class for errors raised by this package."""


class InputContractError(VipsegError, ValueError):
    """An argument violates a documented precondition (shape, range, format)."""


class BackendFaultError(VipsegError, RuntimeError):
    """An encoder produced unusable output (non-finite activations, bad shapes)."""


class ConfigurationError(VipsegError):
    """A configuration file or combination of settings is invalid."""


class SchemaError(InputContractError):
    """A vocabulary, template or dataset file does not match its schema."""

    def __init__(self, message, *, path=None, field=None, line=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.field = field
        self.line = line
