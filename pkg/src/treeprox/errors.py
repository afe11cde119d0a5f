"""Shared exception types, mapped to CLI exit codes."""


class TreeproxError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigurationError(TreeproxError):
    """Invalid knob, flag, or config value (CLI exit code 2)."""

    exit_code = 2


class InputDataError(TreeproxError):
    """Malformed or inconsistent input data (CLI exit code 3)."""

    exit_code = 3


class NumericalError(TreeproxError):
    """A numerical routine failed to produce a usable result (CLI exit code 4)."""

    exit_code = 4
