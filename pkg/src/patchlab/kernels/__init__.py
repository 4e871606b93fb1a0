"""Hot numeric kernels with a compiled core and a numpy fallback.

The Cython extension (`_fastops`) is preferred when it was built; otherwise
the vectorized numpy implementations (`_pyops`) are used. Set
``PATCHLAB_KERNELS=py`` or ``PATCHLAB_KERNELS=cy`` to force a backend.
Both backends implement the same contracts and agree to ~1e-12 (summation
order differs); bitwise reproducibility holds within a fixed backend.
"""

import os

_choice = os.environ.get("PATCHLAB_KERNELS", "").strip().lower()
if _choice not in ("", "py", "cy"):
    raise ValueError(f"PATCHLAB_KERNELS must be 'py' or 'cy', got {_choice!r}")

if _choice == "py":
    from . import _pyops as _impl

    BACKEND = "python"
else:
    try:
        from . import _fastops as _impl

        BACKEND = "compiled"
    except ImportError:
        if _choice == "cy":
            raise ImportError(
                "PATCHLAB_KERNELS=cy but the compiled kernels are not built; "
                "reinstall with a C compiler available"
            ) from None
        from . import _pyops as _impl

        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_kernel = _impl.conv2d_grad_kernel
bilinear_forward = _impl.bilinear_forward
bilinear_grad_input = _impl.bilinear_grad_input

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_grad_input",
    "conv2d_grad_kernel",
    "bilinear_forward",
    "bilinear_grad_input",
]
