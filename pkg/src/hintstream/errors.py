"""Package-wide error types, mapped to CLI exit codes."""


class HintstreamError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HintstreamError):
    """Invalid configuration, mismatched metadata, or bad CLI arguments."""

    exit_code = 2


class NumericFaultError(HintstreamError):
    """A NaN/Inf appeared where all values must stay finite."""

    exit_code = 3


class CausalityViolation(HintstreamError):
    """A streaming output depended on information it must not have seen."""

    exit_code = 4

    def __init__(self, message, first_bad_tick=None):
        super().__init__(message)
        self.first_bad_tick = first_bad_tick


class ProtocolFault(HintstreamError):
    """The two-node protocol was violated (cache underrun, channel overflow)."""

    exit_code = 4
