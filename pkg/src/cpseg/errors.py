"""Exception taxonomy shared across the pipeline.

Every error the CLI reports maps to one of these classes; the class name is
the stable one-line error code printed to stderr.
"""


class CpsegError(Exception):
    """Base class for all pipeline errors."""


# --- volume I/O ---

class IoFailure(CpsegError):
    pass


class MalformedHeader(CpsegError):
    pass


class TruncatedPayload(CpsegError):
    pass


class InvalidVolume(CpsegError):
    pass


# --- manifests / datasets ---

class MissingFile(CpsegError):
    pass


class EmptyLabeledSet(CpsegError):
    pass


class EmptyDataset(CpsegError):
    pass


class MissingCase(CpsegError):
    pass


# --- planning ---

class InfeasiblePlan(CpsegError):
    pass


# --- preprocessing ---

class InterpolationOnLabels(CpsegError):
    pass


# --- network / losses / training ---

class ShapeMismatch(CpsegError):
    pass


class InvalidTarget(CpsegError):
    pass


class MissingGroundTruth(CpsegError):
    pass


class NonFiniteGradient(CpsegError):
    pass


class NonFiniteLoss(CpsegError):
    pass


class ResumeMismatch(CpsegError):
    pass


# --- synthetic data ---

class PlacementFailure(CpsegError):
    pass


# --- configuration ---

class ConfigError(CpsegError):
    pass


class DegenerateStdWarning(UserWarning):
    """Fingerprint std of zero: normalization substitutes divisor 1."""
