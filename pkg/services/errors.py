"""
Errors
Exception hierarchy shared by every service
"""

from typing import Optional


class DTQNError(Exception):
    """Base class for every error raised by this project"""


class InvalidArgument(DTQNError, ValueError):
    """An argument is outside the domain of a numeric primitive"""


class ConfigError(DTQNError, ValueError):
    """A configuration value, section or key is invalid"""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        location = ""
        if source and line is not None:
            location = f"{source}:{line}: "
        elif line is not None:
            location = f"line {line}: "
        elif source:
            location = f"{source}: "
        super().__init__(f"{location}{message}")


class ContractViolation(DTQNError):
    """A caller broke the precondition of an operation"""


class NotReadyError(DTQNError):
    """The replay buffer cannot serve samples yet"""


class DiagnosticError(DTQNError):
    """Non-finite values showed up where finite ones are required"""


class PomdpSyntaxError(DTQNError):
    """A .pomdp file does not match the accepted grammar"""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class PomdpValidationError(DTQNError):
    """A parsed .pomdp model is not a valid POMDP"""


class CheckpointError(DTQNError):
    """A checkpoint container is corrupt or incompatible"""


class NotApplicableError(DTQNError):
    """The requested operation does not apply to this configuration"""


class ExportFormatError(DTQNError):
    """An export file does not match its documented schema"""
