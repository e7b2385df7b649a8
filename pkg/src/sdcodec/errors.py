"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError and
OSError -> 3, NumericError -> 4.
"""


class SDCodecError(Exception):
    pass


class ConfigError(SDCodecError, ValueError):
    """Invalid configuration. ``field`` names the offending key path when known."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class FormatError(SDCodecError, ValueError):
    """Malformed file or bitstream. ``offset`` is a byte offset when known."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class ShapeError(SDCodecError, ValueError):
    pass


class InputTooShort(SDCodecError, ValueError):
    pass


class SilentInput(SDCodecError, ValueError):
    pass


class SilentReference(SilentInput):
    pass


class NumericError(SDCodecError, ArithmeticError):
    pass


class ContractError(SDCodecError, ValueError):
    pass
