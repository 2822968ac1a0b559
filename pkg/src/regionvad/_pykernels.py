"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
BIN_WIDTH = math.pi / 6.0


def component_log_prob(X, means, prec_chol, log_det_prec):
    """Per-component Gaussian log-density from upper-triangular precision factors."""
    X = np.asarray(X, dtype=np.float64)
    n, dim = X.shape
    out = np.empty((n, means.shape[0]), dtype=np.float64)
    for j in range(means.shape[0]):
        z = (X - means[j]) @ prec_chol[j]
        out[:, j] = -0.5 * (dim * LOG_2PI + np.einsum("ij,ij->i", z, z)) + log_det_prec[j]
    return out


def deposit(data, x_lo, x_hi, y_lo, y_hi, xc, yc, sigma, channels):
    """Add a box-truncated Gaussian bump to ``channels`` of ``data`` in place."""
    if x_hi <= x_lo or y_hi <= y_lo:
        return
    dy = np.arange(y_lo, y_hi, dtype=np.float64) - yc
    dx = np.arange(x_lo, x_hi, dtype=np.float64) - xc
    g = np.exp(-(dx[None, :] * dx[None, :] + dy[:, None] * dy[:, None]) / (2.0 * sigma * sigma))
    for c in channels:
        data[y_lo:y_hi, x_lo:x_hi, c] += g


def flow_histogram(u, v, x_lo, x_hi, y_lo, y_hi, threshold):
    """Orientation counts, per-bin mean speeds and background count in a box.

    Each bin's mean is its first magnitude (raster order) plus the mean
    deviation from it, which is exact when all magnitudes in the bin agree.
    """
    uu = np.asarray(u[y_lo:y_hi, x_lo:x_hi], dtype=np.float64).ravel()
    vv = np.asarray(v[y_lo:y_hi, x_lo:x_hi], dtype=np.float64).ravel()
    mag = np.sqrt(uu * uu + vv * vv)
    fg = mag >= threshold
    ang = np.arctan2(vv[fg], uu[fg])
    ang = np.where(ang < 0.0, ang + 2.0 * math.pi, ang)
    bins = np.floor(ang / BIN_WIDTH).astype(np.int64) % 12
    counts = np.bincount(bins, minlength=12).astype(np.int64)
    ref = np.zeros(12)
    present, first = np.unique(bins, return_index=True)
    ref[present] = mag[fg][first]
    # bincount accumulates in input order, matching the compiled loop
    dev = np.bincount(bins, weights=mag[fg] - ref[bins], minlength=12)
    means = np.zeros(12)
    nz = counts > 0
    means[nz] = ref[nz] + dev[nz] / counts[nz]
    return counts, means, int(np.count_nonzero(~fg))


def frame_max(starts, stops, values, n_frames):
    """Max of ``values[i]`` over frames ``[starts[i], stops[i])``; -inf where uncovered."""
    out = np.full(n_frames, -np.inf, dtype=np.float64)
    for lo, hi, val in zip(starts.tolist(), stops.tolist(), values.tolist()):
        lo = max(lo, 0)
        hi = min(hi, n_frames)
        if hi > lo:
            np.maximum(out[lo:hi], val, out=out[lo:hi])
    return out
