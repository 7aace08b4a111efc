"""Exception types shared across the package."""


class VQAuditError(Exception):
    pass


class ConfigurationError(VQAuditError, ValueError):
    """Bad shapes, parameters or options."""


class UsageError(VQAuditError, RuntimeError):
    """API called out of order (e.g. backward without a forward cache)."""


class LoadError(VQAuditError, IOError):
    """Dataset or checkpoint on disk is missing, truncated or inconsistent."""


class NumericalError(VQAuditError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class OutputError(VQAuditError, OSError):
    """An output directory cannot be created or written."""
