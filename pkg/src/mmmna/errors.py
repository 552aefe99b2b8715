"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, phase="forward"):
        super().__init__(f"non-finite value produced by {op} ({phase})")
        self.op = op
        self.phase = phase


class ParseError(ValueError):
    """A file on disk could not be decoded."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset
