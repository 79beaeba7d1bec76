"""Exception types shared across the package."""


class ProtoFedError(Exception):
    """Base class for all package errors."""


class ShapeError(ProtoFedError, ValueError):
    pass


class StateError(ProtoFedError, RuntimeError):
    pass


class DegenerateVectorError(ProtoFedError, ValueError):
    pass


class KeyMismatchError(ProtoFedError):
    pass


class RangeError(ProtoFedError, ValueError):
    pass


class ProtocolError(ProtoFedError):
    pass


class ProtocolAbort(ProtocolError):
    """Raised when no client survives normalization verification."""


class AttackUndefinedError(ProtoFedError, ValueError):
    pass


class ConfigError(ProtoFedError, ValueError):
    pass


class FormatError(ProtoFedError, ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
