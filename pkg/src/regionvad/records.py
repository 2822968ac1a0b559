"""Shared domain records: boxes, per-frame observations, tracklets, object features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

CATEGORIES = ("person", "bicycle", "car", "motorcycle")
FEATURE_DIM = 6


class Box(NamedTuple):
    """Axis-aligned box ``[x1, x2) x [y1, y2)`` in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def pixel_range(self, width, height):
        """Integer pixel spans ``(x_lo, x_hi, y_lo, y_hi)`` covered by the box, clipped."""
        x_lo = max(0, math.ceil(self.x1))
        x_hi = min(width, math.ceil(self.x2))
        y_lo = max(0, math.ceil(self.y1))
        y_hi = min(height, math.ceil(self.y2))
        return x_lo, max(x_lo, x_hi), y_lo, max(y_lo, y_hi)

    def clamp(self, width, height):
        return Box(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                   min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))


@dataclass(frozen=True)
class Observation:
    """One tracked object in one frame (a tracklet record line)."""

    video_id: str
    track_id: int
    frame: int
    box: Box
    category: str
    orientation: Optional[float] = None
    speed: Optional[float] = None
    stationary: bool = False


@dataclass(frozen=True)
class ObjectFeature:
    """Category one-hot plus (orientation, speed) motion attribute."""

    category: str
    orientation: float
    speed: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def onehot(self):
        v = np.zeros(len(CATEGORIES))
        v[CATEGORIES.index(self.category)] = 1.0
        return v

    def vector(self, encoding="radians"):
        """Feature vector; ``radians`` gives R^6, ``circular`` gives R^7 (cos, sin)."""
        if encoding == "radians":
            return np.concatenate([self.onehot, [self.orientation, self.speed]])
        if encoding == "circular":
            if self.speed == 0.0:
                motion = [0.0, 0.0, 0.0]
            else:
                motion = [math.cos(self.orientation), math.sin(self.orientation), self.speed]
            return np.concatenate([self.onehot, motion])
        raise ValueError(f"unknown feature encoding {encoding!r}")


@dataclass
class Tracklet:
    """A window of up to ``t_w`` consecutive observations of one track."""

    video_id: str
    track_id: int
    observations: list = field(default_factory=list)
    feature: Optional[ObjectFeature] = None

    @property
    def frames(self):
        return [o.frame for o in self.observations]

    @property
    def start_frame(self):
        return self.observations[0].frame

    @property
    def stop_frame(self):
        return self.observations[-1].frame + 1

    @property
    def boxes(self):
        return [o.box for o in self.observations]

    @property
    def centers(self):
        return [o.box.center for o in self.observations]

    @property
    def category(self):
        counts = {}
        for o in self.observations:
            counts[o.category] = counts.get(o.category, 0) + 1
        best = max(counts.values())
        return next(o.category for o in self.observations if counts[o.category] == best)
