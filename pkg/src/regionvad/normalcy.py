"""Per-region normalcy mixtures over 6-D object features."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from regionvad import gmm
from regionvad.motion import dominant_motion, hof_union
from regionvad.records import FEATURE_DIM, ObjectFeature, Tracklet

logger = logging.getLogger(__name__)

FALLBACK_KINDS = ("mixture", "single", "pooled")


def feature_from_observations(observations):
    """Object feature from records that carry precomputed motion.

    The category is the most frequent one in the window (first seen wins a
    tie). The window is stationary when stationary records are in the
    majority; otherwise orientation is the circular mean and speed the
    arithmetic mean over the moving records.
    """
    if not observations:
        raise ValueError("a tracklet needs at least one observation")
    counts = {}
    for o in observations:
        counts[o.category] = counts.get(o.category, 0) + 1
    top = max(counts.values())
    category = next(o.category for o in observations if counts[o.category] == top)
    moving = [o for o in observations
              if not o.stationary and o.orientation is not None and o.speed is not None]
    if len(moving) * 2 <= len(observations) - len(moving) or not moving:
        return ObjectFeature(category, 0.0, 0.0)
    c = math.fsum(math.cos(o.orientation) for o in moving)
    s = math.fsum(math.sin(o.orientation) for o in moving)
    theta = math.atan2(s, c) % (2.0 * math.pi)
    if theta >= 2.0 * math.pi:
        theta = 0.0
    speed = math.fsum(o.speed for o in moving) / len(moving)
    return ObjectFeature(category, theta, speed)


def build_tracklets(observations, t_w=3, flows=None):
    """Window each track into consecutive non-overlapping tracklets of ``t_w`` frames.

    The trailing remainder of a track is kept as a shorter tracklet. A gap in
    a track's frames starts a new window. Features come from the records'
    precomputed motion, or from ``flows`` (frame -> FlowField) when given.
    """
    if t_w < 1:
        raise ValueError("t_w must be >= 1")
    tracks = {}
    for o in observations:
        tracks.setdefault((o.video_id, o.track_id), []).append(o)
    out = []
    for (vid, tid), obs in tracks.items():
        obs.sort(key=lambda o: o.frame)
        window = []
        for o in obs:
            if window and (len(window) == t_w or o.frame != window[-1].frame + 1):
                out.append(_finish(vid, tid, window, flows))
                window = []
            window.append(o)
        if window:
            out.append(_finish(vid, tid, window, flows))
    return out


def _finish(video_id, track_id, window, flows):
    t = Tracklet(video_id, track_id, list(window))
    t.feature = feature_from_flow(t, flows) if flows is not None else feature_from_observations(window)
    return t


def feature_from_flow(tracklet, flows, mag_threshold=1.5, stationary_ratio=0.9):
    """Object feature whose motion comes from one HOF over all frames of the window.

    ``flows`` maps frame index to :class:`~regionvad.motion.FlowField`.
    """
    pairs = [(flows[o.frame], o.box) for o in tracklet.observations]
    attr = dominant_motion(hof_union(pairs, mag_threshold), stationary_ratio)
    return ObjectFeature(tracklet.category, attr.orientation, attr.speed)


def assign_region(tracklet, region_map):
    """Region label under the tracklet's first centre (clamped, rounded half up)."""
    if not tracklet.observations:
        raise ValueError("tracklet has no centres")
    x, y = tracklet.observations[0].box.center
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("tracklet centre is not finite")
    xi = min(max(math.floor(x + 0.5), 0), region_map.width - 1)
    yi = min(max(math.floor(y + 0.5), 0), region_map.height - 1)
    return region_map.label_at(xi, yi)


def group_features(tracklets, region_map, encoding="radians"):
    """Feature matrices keyed by region label (every label present, possibly empty)."""
    rows = {r: [] for r in range(region_map.K)}
    for t in tracklets:
        if t.feature is None:
            raise ValueError(f"tracklet {t.video_id}/{t.track_id} has no feature")
        rows[assign_region(t, region_map)].append(t.feature.vector(encoding))
    dim = FEATURE_DIM if encoding == "radians" else FEATURE_DIM + 1
    return {r: (np.array(v) if v else np.empty((0, dim))) for r, v in rows.items()}


@dataclass(frozen=True)
class RegionModel:
    label: int
    kind: str  # one of FALLBACK_KINDS
    n_train: int
    model: Optional[gmm.GaussianMixture]  # None for the pooled tier


class RegionalModelSet:
    """One normalcy mixture (or fallback entry) per region label."""

    def __init__(self, region_map_hash, regions, pooled=None, encoding="radians", config=None):
        self.region_map_hash = region_map_hash
        self.regions = list(regions)
        self.pooled = pooled
        self.encoding = encoding
        self.config = dict(config or {})
        for i, r in enumerate(self.regions):
            if r.label != i:
                raise ValueError("regions must be listed in label order")
            if r.kind not in FALLBACK_KINDS:
                raise ValueError(f"unknown region model kind {r.kind!r}")
            if r.kind == "pooled" and pooled is None:
                raise ValueError(f"region {i} uses the pooled model but none is present")
            if r.kind != "pooled" and r.model is None:
                raise ValueError(f"region {i} has no model")

    @property
    def K(self):
        return len(self.regions)

    @property
    def dimension(self):
        m = self.pooled if self.pooled is not None else next(r.model for r in self.regions if r.model)
        return m.dimension

    def model_for(self, label):
        r = self.regions[label]
        return self.pooled if r.kind == "pooled" else r.model

    def kind(self, label):
        return self.regions[label].kind

    def counts(self):
        return [r.n_train for r in self.regions]

    def to_dict(self):
        return {
            "region_map_hash": self.region_map_hash,
            "encoding": self.encoding,
            "config": dict(self.config),
            "regions": [
                {"label": r.label, "kind": r.kind, "n_train": r.n_train,
                 "model": None if r.model is None else r.model.to_dict()}
                for r in self.regions
            ],
            "pooled": None if self.pooled is None else self.pooled.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        regions = [
            RegionModel(int(r["label"]), r["kind"], int(r["n_train"]),
                        None if r["model"] is None else gmm.GaussianMixture.from_dict(r["model"]))
            for r in doc["regions"]
        ]
        pooled = None if doc["pooled"] is None else gmm.GaussianMixture.from_dict(doc["pooled"])
        return cls(doc["region_map_hash"], regions, pooled, doc.get("encoding", "radians"),
                   doc.get("config"))


def train_regional_models(grouped, region_map, k_max=20, min_samples=50, config=None):
    """Train one normalcy model per region with small-sample fallbacks.

    Regions with at least ``min_samples`` features get a BIC-selected
    full-covariance mixture (up to ``k_max`` components); regions with
    ``D + 2 <= n < min_samples`` get a single full Gaussian; smaller regions
    share a pooled mixture fitted on all features.
    """
    config = config or gmm.EmConfig()
    K = region_map.K
    sets = [np.asarray(grouped.get(r, np.empty((0, FEATURE_DIM))), dtype=np.float64) for r in range(K)]
    nonempty = [s for s in sets if s.shape[0]]
    if not nonempty:
        raise ValueError("no training features in any region")
    dim = nonempty[0].shape[1]
    regions, need_pooled = [], False
    for r, X in enumerate(sets):
        n = X.shape[0]
        if n >= min_samples:
            regions.append(RegionModel(r, "mixture", n, gmm.select_components_bic(X, k_max, "full", config)))
        elif n >= dim + 2:
            regions.append(RegionModel(r, "single", n, gmm.fit_em(X, 1, "full", config)))
        else:
            regions.append(RegionModel(r, "pooled", n, None))
            need_pooled = True
    pooled = None
    if need_pooled:
        pooled = gmm.select_components_bic(np.vstack(nonempty), k_max, "full", config)
    logger.info("trained %d regional models (%s)", K,
                ", ".join(f"{r.label}:{r.kind}/{r.n_train}" for r in regions))
    cfg = {"k_max": k_max, "min_samples": min_samples, "seed": config.seed,
           "ridge": config.ridge, "rel_tolerance": config.rel_tolerance,
           "max_iterations": config.max_iterations, "n_restarts": config.n_restarts}
    encoding = "radians" if dim == FEATURE_DIM else "circular"
    return RegionalModelSet(region_map.content_hash(), regions, pooled, encoding, cfg)


@dataclass(frozen=True)
class Prototype:
    component: int
    weight: float
    mean: np.ndarray
    sample_index: int
    reference: object
    distance: float  # Mahalanobis distance of the chosen sample


def prototypical_events(model_set, region, features, references=None):
    """Nearest training sample to each component mean of a region's mixture.

    Components are reported by descending weight. Distance is Mahalanobis
    under the component's own covariance; ties go to the earlier sample.
    Returns an empty list for regions served by a fallback model.
    """
    if model_set.kind(region) != "mixture":
        return []
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] == 0:
        return []
    refs = list(references) if references is not None else list(range(X.shape[0]))
    model = model_set.model_for(region)
    order = sorted(range(model.n_components), key=lambda j: (-model.weights[j], j))
    out = []
    for j in order:
        d2 = model.mahalanobis_sq(X, j)
        i = int(np.argmin(d2))
        out.append(Prototype(j, float(model.weights[j]), model.means[j].copy(), i, refs[i],
                             float(math.sqrt(max(d2[i], 0.0)))))
    return out
