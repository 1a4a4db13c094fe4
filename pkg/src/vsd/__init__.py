"""Desk-scale visual spatial description stack."""

__version__ = "0.1.0"

from vsd.autodiff import Tape, Tensor, backward, finite_difference_check
from vsd.relations import SpatialRelation

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_check",
    "SpatialRelation",
    "__version__",
]
