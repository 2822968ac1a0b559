"""Regional NLL scoring, frame aggregation and temporal smoothing."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from regionvad import kernels
from regionvad.normalcy import assign_region

DEFAULT_SIGMA = 7.0


@dataclass(frozen=True)
class TrackletScore:
    video_id: str
    track_id: int
    start_frame: int
    stop_frame: int  # exclusive
    region: int
    nll: float
    boxes: tuple  # one Box per frame of the window

    def __post_init__(self):
        if not math.isfinite(self.nll):
            raise ValueError("tracklet NLL must be finite")
        if self.stop_frame <= self.start_frame:
            raise ValueError("tracklet window must cover at least one frame")


def score_features(model_set, regions, features):
    """Vectorised NLL for rows of ``features`` with their region labels."""
    X = np.asarray(features, dtype=np.float64)
    regions = np.asarray(regions, dtype=np.int64)
    out = np.empty(X.shape[0])
    for r in np.unique(regions):
        model = model_set.model_for(int(r))
        if model is None:
            raise RuntimeError(f"region {r} has no model")
        sel = regions == r
        out[sel] = -model.score_samples(X[sel])
    return out


def score_tracklet(model_set, region_map, tracklet):
    """Negative log-likelihood of the tracklet feature under its region's model."""
    if tracklet.feature is None:
        raise ValueError("tracklet has no feature")
    r = assign_region(tracklet, region_map)
    model = model_set.model_for(r)
    if model is None:
        raise RuntimeError(f"region {r} has no model")
    x = tracklet.feature.vector(model_set.encoding)
    nll = -float(model.score_samples(x)[0])
    return TrackletScore(tracklet.video_id, tracklet.track_id, tracklet.start_frame,
                         tracklet.stop_frame, r, nll, tuple(tracklet.boxes))


def score_tracklets(model_set, region_map, tracklets):
    """Batch version of :func:`score_tracklet`; same values, one pass per region."""
    tracklets = list(tracklets)
    if not tracklets:
        return []
    regions = [assign_region(t, region_map) for t in tracklets]
    X = np.array([t.feature.vector(model_set.encoding) for t in tracklets])
    nll = score_features(model_set, regions, X)
    return [TrackletScore(t.video_id, t.track_id, t.start_frame, t.stop_frame, r, float(v),
                          tuple(t.boxes))
            for t, r, v in zip(tracklets, regions, nll)]


@dataclass(frozen=True)
class FrameScoreSeries:
    video_id: str
    scores: np.ndarray
    floor: float
    sigma: float = 0.0

    def __len__(self):
        return len(self.scores)


def frame_scores(scores, n_frames, video_id=None, empty_floor=0.0):
    """Per-frame maximum NLL over the tracklets covering each frame.

    Frames no tracklet covers get the smallest NLL seen in the video, or
    ``empty_floor`` when the video has no tracklets at all.
    """
    scores = list(scores)
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    if video_id is None:
        video_id = scores[0].video_id if scores else ""
    if any(s.video_id != video_id for s in scores):
        raise ValueError("frame_scores expects tracklets from a single video")
    if not scores:
        return FrameScoreSeries(video_id, np.full(n_frames, float(empty_floor)), float(empty_floor))
    starts = np.array([s.start_frame for s in scores], dtype=np.int64)
    stops = np.array([s.stop_frame for s in scores], dtype=np.int64)
    values = np.array([s.nll for s in scores])
    out = np.asarray(kernels.frame_max(starts, stops, values, n_frames))
    floor = float(values.min())
    out[~np.isfinite(out)] = floor
    return FrameScoreSeries(video_id, out, floor)


def gaussian_kernel(sigma):
    """Discrete Gaussian truncated at ``ceil(3 sigma)`` and normalised to sum 1."""
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth_array(values, sigma=DEFAULT_SIGMA):
    values = np.asarray(values, dtype=np.float64)
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError("sigma must be a finite value >= 0")
    if sigma == 0 or values.size == 0:
        return values.copy()
    k = gaussian_kernel(sigma)
    radius = (k.size - 1) // 2
    padded = np.pad(values, radius, mode="symmetric")
    return np.convolve(padded, k, mode="valid")


def smooth(series, sigma=DEFAULT_SIGMA):
    """Gaussian-smoothed copy of a frame score series (``sigma=0`` is the identity)."""
    return replace(series, scores=smooth_array(series.scores, sigma), sigma=float(sigma))
