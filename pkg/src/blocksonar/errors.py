"""Exception hierarchy shared by every blocksonar module."""

from __future__ import annotations


class BlocksonarError(Exception):
    """Base class for all errors raised by this package."""


# wire
class WireError(BlocksonarError):
    pass


class Truncated(WireError):
    pass


class NonCanonical(WireError):
    pass


class CommandTooLong(WireError):
    pass


class BadCommand(WireError):
    pass


class BadMagic(WireError):
    pass


class BadChecksum(WireError):
    pass


class OversizedPayload(WireError):
    pass


class TooManyVectors(WireError):
    pass


class TooManyAddresses(WireError):
    pass


class HandshakeTimeout(WireError):
    pass


class ProtocolViolation(WireError):
    pass


# crawler
class NoSeeds(BlocksonarError):
    pass


# eventlog
class StorageFull(BlocksonarError):
    pass


class IoFailure(BlocksonarError):
    pass


class UnknownHash(BlocksonarError):
    pass


# chainview
class ParseError(BlocksonarError):
    pass


class InconsistentChain(BlocksonarError):
    pass


class OutOfRange(BlocksonarError):
    pass


# classify
class UnknownToChain(BlocksonarError):
    pass


# analytics
class EmptySet(BlocksonarError):
    def __init__(self, message: str = "empty set", censored_count: int = 0):
        super().__init__(message)
        self.censored_count = censored_count


class NotIncluded(BlocksonarError):
    pass


class NotInAnalysisSet(BlocksonarError):
    pass


class TooFewBins(BlocksonarError):
    pass


class NonDecaying(BlocksonarError):
    pass


class NoBlocks(BlocksonarError):
    pass


class TooFewBlocks(BlocksonarError):
    pass


# sim
class ConfigInvalid(BlocksonarError):
    pass


class DisconnectedAfterRetries(BlocksonarError):
    pass


# cli
class MissingInputs(BlocksonarError):
    pass
