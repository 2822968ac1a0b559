"""Histogram-of-flow descriptors and the (orientation, speed) motion attribute."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from regionvad import kernels
from regionvad.records import Box

N_ORIENTATION_BINS = 12
BIN_WIDTH = math.pi / 6.0
N_SPEED_BINS = 4


@dataclass(frozen=True)
class FlowField:
    """Dense flow raster; ``u``/``v`` are horizontal/vertical pixels per frame."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape or u.size == 0:
            raise ValueError("u and v must be non-empty rasters of equal shape")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))


class OrientationBin(NamedTuple):
    pixel_count: int
    mean_speed: float


@dataclass(frozen=True)
class FlowHistogram:
    counts: np.ndarray  # (12,) foreground pixels per orientation bin
    speed_means: np.ndarray  # (12,) mean magnitude per bin, 0 where empty
    background_count: int

    @property
    def total_pixels(self):
        return int(self.counts.sum()) + self.background_count

    @property
    def background_ratio(self):
        return self.background_count / self.total_pixels

    @property
    def mean_speeds(self):
        return np.where(self.counts > 0, self.speed_means, 0.0)

    @property
    def orientation_bins(self):
        return [OrientationBin(int(c), float(s)) for c, s in zip(self.counts, self.mean_speeds)]

    def __add__(self, other):
        n = self.counts + other.counts
        share = np.divide(other.counts, n, out=np.zeros(N_ORIENTATION_BINS), where=n > 0)
        # equal means combine exactly
        means = np.where(self.counts > 0,
                         self.speed_means + (other.speed_means - self.speed_means) * share,
                         other.speed_means)
        return FlowHistogram(n, means,
                             self.background_count + other.background_count)


def hof(flow, box, mag_threshold=1.5):
    """Histogram of flow over the pixels of ``box``.

    Pixels with magnitude below ``mag_threshold`` count as background; the
    others fall into orientation bin ``floor(angle / (pi/6))`` with the angle
    taken in ``[0, 2pi)``.
    """
    if not mag_threshold > 0:
        raise ValueError("mag_threshold must be > 0")
    box = Box(*box)
    x_lo, x_hi, y_lo, y_hi = box.pixel_range(flow.width, flow.height)
    if x_hi <= x_lo or y_hi <= y_lo:
        raise ValueError(f"box {tuple(box)} does not intersect the {flow.width}x{flow.height} raster")
    counts, means, background = kernels.flow_histogram(flow.u, flow.v, x_lo, x_hi, y_lo, y_hi,
                                                      mag_threshold)
    return FlowHistogram(np.asarray(counts, dtype=np.int64), np.asarray(means), int(background))


def hof_union(pairs, mag_threshold=1.5):
    """One histogram over several ``(flow, box)`` pairs, e.g. all frames of a tracklet."""
    total = None
    for flow, box in pairs:
        h = hof(flow, box, mag_threshold)
        total = h if total is None else total + h
    if total is None:
        raise ValueError("hof_union needs at least one (flow, box) pair")
    return total


@dataclass(frozen=True)
class MotionAttribute:
    orientation: float  # radians, bin centre
    speed: float  # pixels / frame
    stationary: bool

    @classmethod
    def still(cls):
        return cls(0.0, 0.0, True)


def dominant_motion(hist, stationary_ratio=0.9):
    """Dominant orientation bin centre and that bin's mean speed.

    Mostly-background or empty histograms give the stationary attribute
    ``(0, 0, True)``. Ties between bins go to the smaller bin index.
    """
    if hist.background_ratio >= stationary_ratio or hist.counts.sum() == 0:
        return MotionAttribute.still()
    b = int(np.argmax(hist.counts))
    return MotionAttribute((b + 0.5) * BIN_WIDTH, float(hist.mean_speeds[b]), False)


def orientation_bin(orientation):
    """Index of the 30-degree bin holding ``orientation`` (radians)."""
    a = math.fmod(orientation, 2.0 * math.pi)
    if a < 0:
        a += 2.0 * math.pi
    return int(math.floor(a / BIN_WIDTH)) % N_ORIENTATION_BINS


def speed_edges(base=1.5):
    return np.array([base * 2.0 ** j for j in range(N_SPEED_BINS)])


def quantize_log_speed(speed, base=1.5):
    """Log-scale speed bin: [b, 2b), [2b, 4b), [4b, 8b), [8b, inf) for base b."""
    if not math.isfinite(speed) or speed < base:
        raise ValueError(f"speed {speed} is below {base}; stationary objects must be handled upstream")
    return int(np.searchsorted(speed_edges(base), speed, side="right")) - 1
