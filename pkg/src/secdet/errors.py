"""Exception hierarchy shared across the toolkit."""


class SecdetError(Exception):
    """Base class for all toolkit errors."""


class RangeError(SecdetError):
    """A plaintext value falls outside the encodable fixed-point range."""


class ShapeError(SecdetError):
    """Tensor shapes are inconsistent with the requested operation."""


class DomainMismatchError(SecdetError):
    """Shares from different domains (field vs masked-real) were combined."""


class ProtocolError(SecdetError):
    """A secure protocol reached an invalid state."""


class DivisionByZeroError(ProtocolError):
    """The opened masked denominator of a secure division was (near) zero."""


class TripleReuseError(ProtocolError):
    """A one-time multiplication triple was consumed twice."""


class DealerError(SecdetError):
    """Dealer randomness is exhausted, malformed, or unavailable."""


class InsufficientSharesError(SecdetError):
    """Fewer polynomial shares than the threshold requires."""


class InsufficientPartiesError(SecdetError):
    """Degree-reduction multiplication needs at least 2t+1 parties."""


class TransportError(SecdetError):
    """Message transport failed or a frame was malformed."""


class RoundOrderError(TransportError):
    """A message arrived with a non-increasing round index for its session."""


class ConfigError(SecdetError):
    """Pipeline configuration is invalid or references missing files."""
