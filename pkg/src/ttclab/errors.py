"""Shared exception types."""


class TTCLabError(Exception):
    """Base class for all package errors."""


class CapExceeded(TTCLabError):
    """Exact enumeration would exceed the configured leaf cap."""


class AbsoluteContinuityViolated(TTCLabError):
    """Numerator policy puts mass where the denominator policy has none."""


class PartitionInvalid(TTCLabError):
    """Prompt partition does not cover the prompt space with k disjoint parts."""


class Infeasible(TTCLabError):
    """A construction was requested outside its feasibility regime."""


class NotHalfBiLevel(TTCLabError):
    """Reward has a trajectory whose bi-level occurs after floor(H/2), or never."""


class EmptySupport(TTCLabError):
    """No trajectory clears the requested reward threshold."""


class EmptyDataset(TTCLabError):
    """Training was requested on an empty dataset."""


class InsufficientSeeds(TTCLabError):
    """Gap analysis needs at least 3 seeds per grid point."""


class ConfigError(TTCLabError):
    """Experiment config failed validation."""
