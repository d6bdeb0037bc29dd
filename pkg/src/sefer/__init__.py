"""Seven-class facial expression recognition pipeline.

Dataset harmonization, inverse-frequency class weighting, an SE-ResNet
implemented directly on numpy arrays (numba-accelerated kernels with a
pure-numpy fallback), gradient-accumulated SGD fine-tuning, and the
0.67*F1 + 0.33*accuracy expression criterion.
"""

__version__ = "0.1.0"

from .labels import CLASS_NAMES, NUM_CLASSES

__all__ = ["CLASS_NAMES", "NUM_CLASSES", "__version__"]
