"""
Exception hierarchy shared by every toolkit module.

Each error carries the process exit code the command-line driver returns
when it reaches the top level.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FIT = 4
EXIT_DOMAIN = 5


class ToolkitError(Exception):
    """Base class for all toolkit failures."""

    exit_code = 1


class ParameterError(ToolkitError, ValueError):
    """A type invariant is violated by a parameter value."""

    exit_code = EXIT_CONFIG

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigError(ToolkitError):
    exit_code = EXIT_CONFIG


class DomainError(ToolkitError, ValueError):
    """An operation was called outside its domain."""

    exit_code = EXIT_DOMAIN


class ModelDomainError(DomainError):
    """The physical model behind a formula does not apply to the input."""


class FitError(ToolkitError):
    """A fit could not produce a trustworthy result."""

    exit_code = EXIT_FIT

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class DataFormatError(ToolkitError):
    exit_code = EXIT_IO

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        where = f"{path}, line {line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")


class OutputError(ToolkitError):
    exit_code = EXIT_IO
