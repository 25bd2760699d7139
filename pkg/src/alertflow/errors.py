"""Exception hierarchy shared across the package.

Every error raised by a public operation is a subclass of AlertflowError,
grouped loosely by the subsystem that raises it.
"""


class AlertflowError(Exception):
    """Base class for all package errors."""


# --- broker ---------------------------------------------------------------


class InvalidName(AlertflowError):
    pass


class AlreadyExists(AlertflowError):
    pass


class UnknownTopic(AlertflowError):
    pass


class UnknownSubscription(AlertflowError):
    pass


class MessageTooLarge(AlertflowError):
    pass


class NotDelivered(AlertflowError):
    pass


class NotInFlight(AlertflowError):
    pass


# --- stores ---------------------------------------------------------------


class DocTooLarge(AlertflowError):
    pass


class NotFound(AlertflowError):
    pass


class StorageFailure(AlertflowError):
    pass


class DigestMismatch(AlertflowError):
    pass


# --- runtime --------------------------------------------------------------


class DuplicateName(AlertflowError):
    pass


class InvalidLayer(AlertflowError):
    pass


class UnknownFunction(AlertflowError):
    pass


class RouteConflict(AlertflowError):
    pass


class NotATimer(AlertflowError):
    pass


class InvalidPeriod(AlertflowError):
    pass


class EnvironmentViolation(AlertflowError):
    """A function touched a topic or key outside its own environment."""


# --- pipeline -------------------------------------------------------------


class ConversionError(AlertflowError):
    pass


class InvalidN(AlertflowError):
    pass


class EmptyWindow(AlertflowError):
    pass


class SinkUnreachable(AlertflowError):
    pass


class DatasetCorrupt(AlertflowError):
    pass


# --- model ----------------------------------------------------------------


class SingleClass(AlertflowError):
    pass


class EmptyDataset(AlertflowError):
    pass


class NonFiniteFeature(AlertflowError):
    pass


class DimensionMismatch(AlertflowError):
    pass


class LengthMismatch(AlertflowError):
    pass


class FormatVersionMismatch(AlertflowError):
    pass


class Corrupt(AlertflowError):
    pass


# --- metrics --------------------------------------------------------------


class UnknownReceipt(AlertflowError):
    pass


class DuplicateEgress(AlertflowError):
    pass


class EmptySeries(AlertflowError):
    pass


class NoData(AlertflowError):
    pass


# --- harness --------------------------------------------------------------


class ConfigError(AlertflowError):
    """Bad configuration; message names the offending section/field."""


class PortInUse(AlertflowError):
    pass
