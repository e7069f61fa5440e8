"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code.
"""


class AffectCalError(Exception):
    category = "error"


class ConfigError(AffectCalError, ValueError):
    category = "config"


class FormatError(AffectCalError, ValueError):
    category = "format"


class OrderError(FormatError):
    pass


class ShapeError(AffectCalError, ValueError):
    category = "format"


class AlignError(ShapeError):
    pass


class EmptyInputError(AffectCalError, ValueError):
    category = "format"


class DegenerateClassError(AffectCalError, ValueError):
    category = "config"


class BatchTooSmallError(AffectCalError, ValueError):
    category = "config"


class DivergenceError(AffectCalError, FloatingPointError):
    category = "divergence"


class CoverageError(AffectCalError, ValueError):
    category = "coverage"


class IoError(AffectCalError, OSError):
    category = "format"
