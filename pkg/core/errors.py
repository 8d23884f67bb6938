from typing import Optional


class RowguardError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(RowguardError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TransformConfigError(ConfigError):
    pass


class OutOfMemoryError(RowguardError):
    pass


class OwnershipError(RowguardError):
    pass


class InUseError(RowguardError):
    pass


class UnknownDomainError(RowguardError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown domain"


class TraceError(RowguardError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class MetricsError(RowguardError, ValueError):
    pass


class OrderError(RowguardError, ValueError):
    pass
