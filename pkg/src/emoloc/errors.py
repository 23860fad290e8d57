"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An op was used outside its contract (wrong tape, non-scalar loss, ...)."""


class PreconditionError(ValueError):
    """Input violates an operation's precondition (odd length, empty episode, ...)."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class ParseError(ValueError):
    """Malformed dataset, checkpoint, or detections file."""

    def __init__(self, message: str, line: int | None = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.line = line
        self.path = path


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""
