"""Shared exception types."""


class EvPolicyError(Exception):
    """Base class for all package errors."""


class TraceSchemaError(EvPolicyError):
    """Input file is missing a required column or has an unusable header."""


class TraceValidationError(EvPolicyError):
    """Trace content violates an invariant (spacing, sign, length)."""


class ConfigError(EvPolicyError, ValueError):
    """A run configuration is incomplete or inconsistent."""


class RuleParseError(EvPolicyError):
    """Rule script could not be parsed."""

    def __init__(self, message: str, line: int, column: int, token: str = ""):
        super().__init__(f"line {line}, col {column}: {message}")
        self.line = line
        self.column = column
        self.token = token


class PolicyFault(EvPolicyError):
    """A policy could not keep producing decisions; the episode must abort."""

    def __init__(self, message: str, step_index: int | None = None,
                 diagnostics: str = ""):
        super().__init__(message)
        self.step_index = step_index
        self.diagnostics = diagnostics


class PolicySpawnError(EvPolicyError):
    """External policy process could not be started."""


class OperatorTransportError(EvPolicyError):
    """The mutation operator endpoint could not be reached or replied badly."""
