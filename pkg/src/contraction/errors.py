"""Exception hierarchy shared by the solvers and the CLI exit-code mapping."""


class ContractionError(Exception):
    """Base class for solver failures."""


class HypothesisError(ContractionError):
    """A hypothesis of the underlying theorem fails for the given input."""


class FieldNotFinite(HypothesisError):
    """The right-hand side is undefined or non-finite somewhere it must be sampled."""


class LipschitzUnbounded(HypothesisError):
    """No finite Lipschitz constant in ``y`` on the rectangle; uniqueness is not guaranteed."""


class NotHyperbolic(HypothesisError):
    """The linearisation has an eigenvalue with (near) zero real part."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class SingularJacobian(HypothesisError):
    """Newton's method met a singular Jacobian at or near the root."""


class CalibrationError(HypothesisError):
    """Cutoff/contraction constants could not be calibrated."""


class IterateEscapedRectangle(ContractionError):
    """A Picard iterate left the rectangle; the M/L estimates are wrong."""


class NoConvergence(ContractionError):
    """An iteration hit its budget without meeting its tolerance."""
