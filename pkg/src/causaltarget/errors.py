"""Exception types shared across the toolkit."""


class CausalTargetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CausalTargetError):
    """Invalid configuration or input specification (CLI exit code 2)."""


class EstimationError(CausalTargetError):
    """Runtime estimation failure (CLI exit code 3)."""


class MissingSupportError(EstimationError):
    """A prediction or estimate has no usable support (e.g. no co-leafed arm)."""


class CollinearityError(EstimationError):
    """Rank-deficient design matrix in a regression fit."""


class DegenerateScores(EstimationError):
    """Score set unusable for a diagnostic (e.g. zero-variance CATE estimates)."""
