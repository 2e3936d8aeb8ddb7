"""Error classes shared across the pipeline; the CLI maps them to exit codes."""


class ShearsError(Exception):
    """Base class for pipeline failures."""


class ConfigError(ShearsError):
    """Invalid configuration value or file (CLI exit code 2)."""


class ArtifactError(ShearsError):
    """Missing, corrupt, or hash-mismatched stage artifact (CLI exit code 3)."""


class NumericError(ShearsError):
    """Non-finite values where the contracts require finite ones (CLI exit code 4)."""
