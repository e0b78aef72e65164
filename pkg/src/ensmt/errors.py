"""Exception types shared across the package.

Every class carries a short ``category`` used by the command-line tool
when it prints a machine-parsable error line.
"""


class EnsmtError(Exception):
    category = "error"


class ShapeError(EnsmtError, ValueError):
    category = "shape"


class DomainError(EnsmtError, ValueError):
    category = "domain"


class NonFiniteError(EnsmtError, FloatingPointError):
    category = "nonfinite"


class GraphError(EnsmtError, RuntimeError):
    category = "graph"


class CheckpointError(EnsmtError, ValueError):
    category = "checkpoint"


class DataError(EnsmtError, ValueError):
    category = "data"


class ConfigError(EnsmtError, ValueError):
    category = "config"
