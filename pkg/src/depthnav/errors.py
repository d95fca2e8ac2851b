"""Exception types shared across the package.

The CLI maps these onto process exit codes, so stage code should raise the
most specific type that applies rather than a bare Exception.
"""


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration (CLI exit code 2)."""


class PrerequisiteError(RuntimeError):
    """A stage input is missing or its recorded hash does not match (exit code 3)."""


class NumericalError(ArithmeticError):
    """Non-finite values or divergence detected during computation (exit code 4)."""
