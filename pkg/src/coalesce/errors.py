"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class CoalesceError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CoalesceError, ValueError):
    pass


# -- transport ---------------------------------------------------------------

class TransportError(CoalesceError):
    pass


class ShutdownError(TransportError):
    pass


class TruncationError(TransportError):
    pass


class DeadlockError(TransportError):
    """Raised by a wait that timed out; ``unmatched`` lists the stuck handles."""

    def __init__(self, message: str, unmatched=()):
        super().__init__(message)
        self.unmatched = list(unmatched)


# -- wire --------------------------------------------------------------------

class WireError(CoalesceError):
    pass


class EncodeError(WireError):
    pass


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class ShortRead(WireError):
    pass


class TrailingGarbage(WireError):
    pass


class NonCanonical(WireError):
    """Sub-messages out of (client_id, tag) order or duplicated."""


# -- comms manager -----------------------------------------------------------

class PhaseViolation(CoalesceError):
    pass


class DuplicateRequest(CoalesceError):
    pass


class BufferNotReady(CoalesceError):
    pass


class RoutingError(CoalesceError):
    pass


# -- step manager ------------------------------------------------------------

class RegistrationError(CoalesceError):
    pass


class StepError(CoalesceError):
    """A callback or framework action failed; carries where it happened."""

    def __init__(self, message: str, *, step: int, phase, client_id=None):
        super().__init__(message)
        self.step = step
        self.phase = phase
        self.client_id = client_id
        self.report = None


# -- clients / bench ---------------------------------------------------------

class NumericalError(CoalesceError):
    pass


class HaloFormatError(CoalesceError):
    pass


class CompositingError(CoalesceError):
    pass


class TransparencyViolation(CoalesceError):
    pass


class UndefinedRatio(CoalesceError, ZeroDivisionError):
    pass
