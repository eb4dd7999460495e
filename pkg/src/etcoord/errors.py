"""Exception taxonomy, kept small so the CLI can map failures to exit codes."""


class EtcoordError(Exception):
    """Base class for all library errors."""


class ConfigError(EtcoordError):
    """Invalid parameters, malformed files, or unsupported schema content."""


class DimensionError(EtcoordError):
    """Vector/matrix shape mismatch or agent index out of range."""


class DomainError(EtcoordError):
    """Semantically invalid request: infeasible start, violated precondition."""


class NumericError(EtcoordError):
    """Numerical failure: blow-up, non-convergence, non-finite samples."""
