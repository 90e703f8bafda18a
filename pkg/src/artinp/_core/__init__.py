"""Hot kernels with a compiled backend and a pure-numpy fallback.

The Cython extension is used when it was built and ``ARTINP_PURE_PYTHON`` is
unset; otherwise the numpy implementations in :mod:`._fallback` are used.
``BACKEND`` names the active one.
"""
import os

from . import _fallback

if os.environ.get("ARTINP_PURE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

poisson_cg = _impl.poisson_cg
ssim_at_centers = _impl.ssim_at_centers

__all__ = ["BACKEND", "poisson_cg", "ssim_at_centers"]
