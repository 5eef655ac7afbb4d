"""Exception types shared across the package."""


class UpresError(Exception):
    """Base class for all package-specific errors."""


class DecodeError(UpresError, ValueError):
    """An encoded image stream could not be decoded."""


class ConfigError(UpresError, ValueError):
    """A configuration value violates a hard constraint."""


class ValidationError(UpresError, ValueError):
    """Structured input failed rule validation.

    ``findings`` holds one human-readable message per violated rule.
    """

    def __init__(self, findings):
        self.findings = [str(f) for f in findings]
        super().__init__("; ".join(self.findings) or "validation failed")


class CaptionParseError(UpresError, ValueError):
    """Caption JSON is malformed; the message carries the position."""


class NotFoundError(UpresError, LookupError):
    """A referenced entity (job, blob, backend, candidate) does not exist."""


class IllegalTransition(UpresError, RuntimeError):
    """A job state change outside the declared transition graph was attempted."""


class TransportError(UpresError, RuntimeError):
    """The inference backend could not be reached (after retries)."""


class RequestError(UpresError, RuntimeError):
    """The inference backend rejected the request (4xx); not retried."""


class ProtocolError(UpresError, RuntimeError):
    """The inference backend answered outside the wire contract."""
