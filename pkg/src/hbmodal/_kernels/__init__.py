"""Hot inner loops with a compiled implementation and a numpy fallback.

The compiled extension is used when it imports cleanly.  Setting the
environment variable ``HBMODAL_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
if os.environ.get("HBMODAL_PURE_PYTHON", "") != "1":
    try:
        from . import _compiled as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

band_nll_single = _impl.band_nll_single
band_reduced_single = _impl.band_reduced_single
mixture_loglik = _impl.mixture_loglik

__all__ = ["BACKEND", "band_nll_single", "band_reduced_single", "mixture_loglik", "_fallback"]
