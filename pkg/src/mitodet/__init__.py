"""Domain-adaptive mitosis detection, built from scratch on numpy.

The package trains a small multi-scale detector in alternation with a
prototype-based domain classifier so the detector's features stop
carrying scanner/tissue identity, and evaluates with mirror test-time
augmentation and point-based F1.
"""

from .tensor import Graph, ShapeError, Tensor, no_grad

__all__ = ["Graph", "ShapeError", "Tensor", "no_grad"]
__version__ = "0.1.0"
