"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy versions.
Set ``DEEPGMM_BACKEND=python`` to force the fallback.
"""
import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

_NAMES = ("log_gauss_table", "im2col", "col2im", "maxpool2_forward", "maxpool2_backward")


def _load_compiled():
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def available_backends():
    backends = {"python": _pykernels}
    compiled = _load_compiled()
    if compiled is not None:
        backends["cython"] = compiled
    return backends


if os.environ.get("DEEPGMM_BACKEND", "").lower() == "python":
    _impl, BACKEND = _pykernels, "python"
else:
    _impl = _load_compiled()
    BACKEND = "cython"
    if _impl is None:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl, BACKEND = _pykernels, "python"

log_gauss_table = _impl.log_gauss_table
im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
