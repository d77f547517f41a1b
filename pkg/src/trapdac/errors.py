"""Exception taxonomy.

ValueError (and subclasses) mean the caller handed us something malformed;
SimulationError subclasses mean the request was well-formed but physically
or protocol-wise impossible. The service layer maps the former to HTTP 400
and the latter to 409 so the CLI can distinguish usage errors (exit 1)
from infeasible-physics errors (exit 2).
"""


class FramingError(ValueError):
    """Bitstream or trace cannot be parsed into whole frames."""


class DuplicateChannelError(ValueError):
    """A packet addresses the same channel twice (final code ambiguous)."""


class SimulationError(Exception):
    """Well-formed request, physically or protocol-wise impossible."""


class ProtocolViolationError(SimulationError):
    """LDAC arrived while a DAC was still receiving data (BUSY low)."""


class InfeasibleRateError(SimulationError):
    """Requested update rate exceeds what the packet stream allows."""


class NoWellError(SimulationError):
    """Well search failed to converge to a confining minimum."""


class SaddlePointError(NoWellError):
    """Stationary point found but the Hessian is not positive definite."""


class InfeasibleVoltagesError(SimulationError):
    """Voltage solve has no solution within the DAC span."""

    def __init__(self, message, binding_channels=()):
        super().__init__(message)
        self.binding_channels = tuple(binding_channels)


class UnphysicalRatioError(SimulationError):
    """Sideband ratio >= 1; thermometry formula breaks down."""
