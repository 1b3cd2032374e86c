"""Variable selection with ABC Bayesian forests."""
from ._accel import USE_NUMBA
from .model import Dataset, Forest, SplitRule, Tree

__version__ = "0.1.0"

__all__ = ["Dataset", "Forest", "SplitRule", "Tree", "USE_NUMBA", "__version__"]
