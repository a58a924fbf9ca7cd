"""
Exception hierarchy for the convdl workbench
"""
from typing import Any, Optional, Sequence


class ConvdlError(Exception):
    """Base class for all workbench errors"""


class ShapeError(ConvdlError, ValueError):
    """Array shapes, atom counts or channel counts do not match"""

    def __init__(self, message: str, expected: Any = None, actual: Any = None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual

    def to_dict(self):
        return {
            'error': 'shape',
            'message': str(self),
            'expected': repr(self.expected),
            'actual': repr(self.actual),
        }


class ConfigError(ConvdlError, ValueError):
    """Invalid or missing configuration value"""


class GridError(ConvdlError, ValueError):
    """No worker grid satisfies the sub-domain size constraints"""

    def __init__(self, message: str, max_feasible: Optional[int] = None):
        super().__init__(message)
        self.max_feasible = max_feasible


class EmptyRegionError(ConvdlError, ValueError):
    """Candidate search requested on an empty region"""


class ProtocolError(ConvdlError, RuntimeError):
    """A worker received a message the routing rules forbid"""


class TransportError(ConvdlError, RuntimeError):
    """The message fabric failed or timed out"""


class NonFiniteError(ConvdlError, FloatingPointError):
    """NaN or Inf values appeared in a result"""


class DivergenceError(ConvdlError, RuntimeError):
    """The divergence guard tripped on at least one worker"""

    def __init__(self, message: str, workers: Sequence[int] = (),
                 z_hat: Any = None, stats: Any = None):
        super().__init__(message)
        self.workers = list(workers)
        self.z_hat = z_hat
        self.stats = stats


class SignalFormatError(ConvdlError, ValueError):
    """Malformed .sig container or unreadable image"""
