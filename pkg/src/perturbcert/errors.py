"""Exception types shared across the package.

Precondition violations (bad shapes, out-of-range arguments) raise plain
ValueError; the classes below mark numerical failures that callers may want
to catch and recover from (e.g. fall back from the exact solver to the
margin bound).
"""

from __future__ import annotations


class PerturbCertError(Exception):
    """Base class for numerical failures raised by this package."""


class SvdConvergenceError(PerturbCertError):
    """SVD iteration failed to converge; carries the backend diagnostic."""


class TanhRangeError(PerturbCertError):
    """A tanh inversion target has magnitude >= 1."""


class ReluBranchError(PerturbCertError):
    """ReLU inversion requested outside the strictly-positive branch.

    Signals that the exact single-layer solver does not apply at this
    operating point; the margin-Lipschitz bound remains available.
    """


class RankDeficientDownstreamError(PerturbCertError):
    """A downstream linear step has no right inverse at the requested target.

    Raised when the least-squares residual of a layer inversion exceeds
    tolerance, i.e. the target is outside the image of the downstream map.
    """


class ZeroGradientError(PerturbCertError):
    """Power iteration landed in the kernel of the restricted Jacobian."""


class TrainingDivergedError(PerturbCertError):
    """Training loss exceeded the divergence threshold.

    Attributes:
        trace: per-epoch losses recorded up to the failure.
        epoch: index of the offending epoch.
    """

    def __init__(self, message: str, trace: list[float], epoch: int):
        super().__init__(message)
        self.trace = trace
        self.epoch = epoch


class NonFiniteLossError(PerturbCertError):
    """A loss or gradient evaluation produced NaN/Inf.

    Attributes:
        iteration: optimizer iteration at which the value went non-finite.
    """

    def __init__(self, message: str, iteration: int = -1):
        super().__init__(message)
        self.iteration = iteration
