"""Exception types shared across the package.

Every contract violation raises one of these rather than a bare
ValueError, so callers (and the CLI) can report a machine-parsable
error kind.
"""


class FedoapError(Exception):
    """Base class for all package errors."""


# --- tensor / autodiff ---

class ShapeMismatch(FedoapError):
    pass


class NonFiniteValue(FedoapError):
    pass


class NonScalarRoot(FedoapError):
    pass


class DetachedRoot(FedoapError):
    pass


class NegativeVariance(FedoapError):
    pass


class MissingGradient(FedoapError):
    pass


class StepOutOfRange(FedoapError):
    pass


# --- model ---

class InvalidConfig(FedoapError):
    pass


class DimMismatch(FedoapError):
    pass


class EmptyKV(FedoapError):
    pass


# --- losses / metrics ---

class NonBinaryTarget(FedoapError):
    pass


class NonBinaryInput(FedoapError):
    pass


# --- federation protocol ---

class RoundMismatch(FedoapError):
    pass


class PartitionViolation(FedoapError):
    pass


class NameSetMismatch(FedoapError):
    pass


class EmptyMessageSet(FedoapError):
    pass


class EmptyValidationSplit(FedoapError):
    pass


class EmptySplit(FedoapError):
    pass


class FormulaMeasurementMismatch(FedoapError):
    pass


# --- synthetic data / file formats ---

class InvalidProfile(FedoapError):
    pass


class SplitTooSmall(FedoapError):
    pass


class BadMagic(FedoapError):
    pass


class TruncatedFile(FedoapError):
    pass


class VersionUnsupported(FedoapError):
    pass
