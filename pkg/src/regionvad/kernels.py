"""Backend selection for the numeric inner loops.

The compiled extension is used when it imports; set ``REGIONVAD_BACKEND=python``
to force the numpy fallback (the test-suite runs both).
"""
import logging
import os

import numpy as np

from regionvad import _pykernels

logger = logging.getLogger(__name__)

_FUNCS = ("component_log_prob", "deposit", "flow_histogram", "frame_max")


def _load(name):
    if name == "python":
        return _pykernels
    if name in ("auto", "cython"):
        try:
            from regionvad import _ckernels
        except ImportError:
            if name == "cython":
                raise
            logger.debug("compiled kernels unavailable, using numpy fallback")
            return _pykernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name):
    """Switch the active backend ('auto', 'cython' or 'python'); returns the module."""
    global BACKEND, _impl
    _impl = _load(name)
    BACKEND = "cython" if _impl is not _pykernels else "python"
    return _impl


def available_backends():
    names = ["python"]
    try:
        from regionvad import _ckernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


_impl = None
BACKEND = None
use_backend(os.environ.get("REGIONVAD_BACKEND", "auto"))


def component_log_prob(X, means, prec_chol, log_det_prec):
    return _impl.component_log_prob(
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(prec_chol, dtype=np.float64),
        np.ascontiguousarray(log_det_prec, dtype=np.float64),
    )


def deposit(data, x_lo, x_hi, y_lo, y_hi, xc, yc, sigma, channels):
    _impl.deposit(data, int(x_lo), int(x_hi), int(y_lo), int(y_hi), float(xc), float(yc),
                  float(sigma), np.ascontiguousarray(channels, dtype=np.int64))


def flow_histogram(u, v, x_lo, x_hi, y_lo, y_hi, threshold):
    return _impl.flow_histogram(
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        int(x_lo), int(x_hi), int(y_lo), int(y_hi), float(threshold),
    )


def frame_max(starts, stops, values, n_frames):
    return _impl.frame_max(
        np.ascontiguousarray(starts, dtype=np.int64),
        np.ascontiguousarray(stops, dtype=np.int64),
        np.ascontiguousarray(values, dtype=np.float64),
        int(n_frames),
    )
