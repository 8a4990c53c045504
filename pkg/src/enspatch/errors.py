"""Exception hierarchy shared across the package."""


class EnspatchError(Exception):
    """Base class for all package errors."""


class ConfigError(EnspatchError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message, line=None):
        self.field = field
        self.message = message
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{field}{where}: {message}")


class PatchSizeError(EnspatchError, ValueError):
    pass


class PatchFormatError(EnspatchError, ValueError):
    pass


class ContractError(EnspatchError, ValueError):
    """Arguments violate a documented pre-condition."""


class CapabilityError(EnspatchError, TypeError):
    pass


class NumericError(EnspatchError, FloatingPointError):
    pass


class DetectorInputError(EnspatchError, ValueError):
    pass


class TrainingError(EnspatchError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DatasetError(EnspatchError, ValueError):
    pass


class AnnotationParseError(DatasetError):
    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")
