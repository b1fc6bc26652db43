"""
Exception hierarchy shared by the engine, the flow solvers and the harness.
"""


class VortexFmmError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(VortexFmmError, ValueError):
    """Input violates a precondition (non-finite values, bad parameters)."""


class SingularKernelError(InvalidInputError):
    """Distinct particles coincide while the singular kernel is in use."""


class OrderMismatchError(InvalidInputError):
    """Two expansions of different order were combined."""


class MortonOverflowError(InvalidInputError):
    """Requested Morton level does not fit in a 64-bit key."""


class PayloadDecodeError(VortexFmmError):
    """A LET payload could not be decoded."""

    def __init__(self, message, sender_rank=None):
        self.sender_rank = sender_rank
        if sender_rank is not None:
            message = f"{message} (sender rank {sender_rank})"
        super().__init__(message)


class CommunicationTimeoutError(VortexFmmError):
    """A rank did not deliver within the configured timeout."""

    def __init__(self, message, stalled_ranks=()):
        self.stalled_ranks = tuple(stalled_ranks)
        if self.stalled_ranks:
            message = f"{message}; stalled rank(s): {', '.join(str(r) for r in self.stalled_ranks)}"
        super().__init__(message)


class ConvergenceError(VortexFmmError):
    """An iterative solve did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual}, iterations={iterations})")


class ConfigValidationError(VortexFmmError):
    """RunConfig failed validation."""


class AcceptanceBandError(VortexFmmError):
    """Vortex and spectral spectra disagree beyond the acceptance band."""

    def __init__(self, message, shell=None, log_ratio=None):
        self.shell = shell
        self.log_ratio = log_ratio
        super().__init__(message)
