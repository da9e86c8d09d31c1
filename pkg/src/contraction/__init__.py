"""Contraction-mapping constructions for ODEs.

* :mod:`contraction.picard` -- Picard iterates with a-priori, Cauchy-tail and
  Gronwall bounds for scalar initial value problems.
* :mod:`contraction.hartman` -- numerical time-1 Hartman-Grobman conjugacy
  near a hyperbolic fixed point.
* :mod:`contraction.exprparse` and :mod:`contraction.numcore` -- the
  expression language and numerical kernels both rely on.
"""

from . import exprparse, hartman, numcore, picard
from .errors import (CalibrationError, ContractionError, FieldNotFinite, HypothesisError,
                     IterateEscapedRectangle, LipschitzUnbounded, NoConvergence, NotHyperbolic,
                     SingularJacobian)

__version__ = "0.1.0"

__all__ = [
    "exprparse", "numcore", "picard", "hartman",
    "ContractionError", "HypothesisError", "FieldNotFinite", "LipschitzUnbounded",
    "NotHyperbolic", "SingularJacobian", "CalibrationError", "IterateEscapedRectangle",
    "NoConvergence",
]
