"""Exception taxonomy for the pipebroker package."""


class PipebrokerError(Exception):
    """Base class for all pipebroker errors."""


class InvalidConfigurationError(PipebrokerError):
    """A configuration value violates its documented constraints."""


class InvalidInputError(PipebrokerError):
    """An operation received an argument outside its domain."""


class TransportClosedError(PipebrokerError):
    """Send attempted on a closed endpoint."""


class CorruptBlockError(PipebrokerError):
    """A block failed its length or checksum check after a transport hop."""


class DuplicateWriteError(PipebrokerError):
    """The same block id was written to the broker twice."""


class OwnershipError(PipebrokerError):
    """A consumer asked for a block id it does not own under the static mapping."""


class DeliveryExhaustedError(PipebrokerError):
    """A block id was read a second time; delivery is exactly-once."""


class MissingBlockError(PipebrokerError):
    """The broker shut down without the requested block ever being written."""


class DrainTimeoutError(PipebrokerError):
    """Shutdown could not flush all staged blocks in time.

    ``undelivered`` lists the block ids that were written but never reached
    a consumer.
    """

    def __init__(self, message, undelivered=()):
        super().__init__(message)
        self.undelivered = list(undelivered)


class HarnessError(PipebrokerError):
    """An end-to-end run failed.

    ``partial`` carries whatever per-method reports completed before the
    failure (used by method comparisons).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial or {}
