"""Reverse-mode differentiation helpers, optimiser and training loops.

``engine.train`` is imported explicitly by callers; it depends on the model.
"""

from .autodiff import backward, central_differences, graph_size, relative_error
from .optim import Adam

__all__ = ["Adam", "backward", "central_differences", "graph_size", "relative_error"]
