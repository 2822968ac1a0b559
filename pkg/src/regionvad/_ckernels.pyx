# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a numpy twin in ``_pykernels`` with the same
signature; ``regionvad.kernels`` picks one at import time.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, exp, floor, log, sqrt, M_PI

cnp.import_array()

cdef double LOG_2PI = log(2.0 * M_PI)
cdef double BIN_WIDTH = M_PI / 6.0


def component_log_prob(const double[:, ::1] X,
                       const double[:, ::1] means,
                       const double[:, :, ::1] prec_chol,
                       const double[::1] log_det_prec):
    """Per-component Gaussian log-density from upper-triangular precision factors.

    ``prec_chol[j]`` is upper triangular with ``inv(cov_j) = P @ P.T``.
    Returns an (N, k) array.
    """
    cdef Py_ssize_t n_samples = X.shape[0]
    cdef Py_ssize_t dim = X.shape[1]
    cdef Py_ssize_t k = means.shape[0]
    cdef Py_ssize_t n, j, r, c
    cdef double acc, maha, base
    out_arr = np.empty((n_samples, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    diff_arr = np.empty(dim, dtype=np.float64)
    cdef double[::1] diff = diff_arr
    base = dim * LOG_2PI
    with nogil:
        for n in range(n_samples):
            for j in range(k):
                for r in range(dim):
                    diff[r] = X[n, r] - means[j, r]
                maha = 0.0
                for c in range(dim):
                    acc = 0.0
                    for r in range(c + 1):
                        acc = acc + diff[r] * prec_chol[j, r, c]
                    maha = maha + acc * acc
                out[n, j] = -0.5 * (base + maha) + log_det_prec[j]
    return out_arr


def deposit(double[:, :, ::1] data, Py_ssize_t x_lo, Py_ssize_t x_hi,
            Py_ssize_t y_lo, Py_ssize_t y_hi, double xc, double yc,
            double sigma, const cnp.int64_t[::1] channels):
    """Add a box-truncated Gaussian bump to ``channels`` of ``data`` in place."""
    cdef Py_ssize_t x, y, c
    cdef Py_ssize_t n_ch = channels.shape[0]
    cdef double g, dx, dy
    cdef double denom = 2.0 * sigma * sigma
    with nogil:
        for y in range(y_lo, y_hi):
            dy = y - yc
            for x in range(x_lo, x_hi):
                dx = x - xc
                g = exp(-(dx * dx + dy * dy) / denom)
                for c in range(n_ch):
                    data[y, x, channels[c]] += g


def flow_histogram(const double[:, ::1] u, const double[:, ::1] v,
                   Py_ssize_t x_lo, Py_ssize_t x_hi, Py_ssize_t y_lo,
                   Py_ssize_t y_hi, double threshold):
    """Orientation counts, per-bin mean speeds and background count in a box.

    Each bin's mean is its first magnitude (raster order) plus the mean
    deviation from it, which is exact when all magnitudes in the bin agree.
    """
    counts_arr = np.zeros(12, dtype=np.int64)
    means_arr = np.zeros(12, dtype=np.float64)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef double[::1] means = means_arr
    cdef double ref[12]
    cdef double dev[12]
    cdef Py_ssize_t x, y, b
    cdef cnp.int64_t background = 0
    cdef double mag, ang, uu, vv
    with nogil:
        for b in range(12):
            ref[b] = 0.0
            dev[b] = 0.0
        for y in range(y_lo, y_hi):
            for x in range(x_lo, x_hi):
                uu = u[y, x]
                vv = v[y, x]
                mag = sqrt(uu * uu + vv * vv)
                if mag < threshold:
                    background += 1
                    continue
                ang = atan2(vv, uu)
                if ang < 0.0:
                    ang = ang + 2.0 * M_PI
                b = <Py_ssize_t>floor(ang / BIN_WIDTH)
                if b >= 12:
                    b = b - 12
                if counts[b] == 0:
                    ref[b] = mag
                counts[b] += 1
                dev[b] += mag - ref[b]
        for b in range(12):
            if counts[b] > 0:
                means[b] = ref[b] + dev[b] / counts[b]
    return counts_arr, means_arr, int(background)


def frame_max(const cnp.int64_t[::1] starts, const cnp.int64_t[::1] stops,
              const double[::1] values, Py_ssize_t n_frames):
    """Max of ``values[i]`` over frames ``[starts[i], stops[i])``; -inf where uncovered."""
    out_arr = np.full(n_frames, -np.inf, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, f, lo, hi
    with nogil:
        for i in range(values.shape[0]):
            lo = starts[i] if starts[i] > 0 else 0
            hi = stops[i] if stops[i] < n_frames else n_frames
            for f in range(lo, hi):
                if values[i] > out[f]:
                    out[f] = values[i]
    return out_arr
