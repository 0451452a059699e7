"""Exception hierarchy shared by every progseg module."""


class ProgsegError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "ERROR"


class ShapeError(ProgsegError, ValueError):
    code = "SHAPE"


class ContractError(ProgsegError, ValueError):
    code = "CONTRACT"


class DataError(ProgsegError, ValueError):
    code = "DATA"


class FormatError(ProgsegError, ValueError):
    code = "FORMAT"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ProgsegError, ValueError):
    code = "CONFIG"

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class CheckpointError(ProgsegError, IOError):
    code = "CHECKPOINT"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
