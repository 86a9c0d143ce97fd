"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, profile, or model description.

    ``key`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class TraceParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TraceValidationError(ValueError):
    pass


class CacheFull(RuntimeError):
    """Not enough free KV-cache slots to satisfy an allocation."""


class InfeasiblePlacement(RuntimeError):
    pass


class SchedulerError(RuntimeError):
    """Logic error in scheduler bookkeeping (duplicate admit, unknown request)."""
