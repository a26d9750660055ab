"""habfuse: multi-sensor harmful-algal-bloom concentration mapping.

Self-supervised stacked-RBM encoding of gridded reflectance, hierarchical
invariant-information clustering into context-free segments, histogram-based
context assignment from in-situ matchups, and multi-stream product merging
with quality indicators.
"""

__version__ = "0.1.0"

from .backend import active_backend

__all__ = ["active_backend", "__version__"]
