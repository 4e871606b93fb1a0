"""patchlab: a desk-scale lab for background-context adversarial patches.

Builds adversarial patches whose foreground is a fixed image of the
protected object and whose surrounding background pixels are optimized to
hide that object class from a family of toy grid detectors, then measures
the result with pseudo-ground-truth AP, per-target confidences,
transferability matrices, and a smoothness-weight ablation.
"""

from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "KERNEL_BACKEND", "__version__"]
