"""Region discovery: activity heatmaps, pixel clustering, K selection and rendering."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from regionvad import gmm, kernels
from regionvad.motion import orientation_bin, quantize_log_speed
from regionvad.records import CATEGORIES, Box

logger = logging.getLogger(__name__)

CLUSTER_METHODS = ("gmm-full", "gmm-diag", "gmm-spherical", "gmm-tied", "kmeans")
_METHOD_MODES = {"gmm-full": "full", "gmm-diag": "diagonal", "gmm-spherical": "spherical",
                 "gmm-tied": "tied"}


@dataclass(frozen=True)
class AttributeLayout:
    """Channel spans ``(start, stop)`` of the heatmap attribute vector."""

    category: tuple = (0, 4)
    direction: tuple = (4, 16)
    log_speed: tuple = (16, 20)
    stationary: tuple = (20, 21)

    def __post_init__(self):
        spans = sorted([self.category, self.direction, self.log_speed, self.stationary])
        pos = 0
        for lo, hi in spans:
            if lo != pos or hi <= lo:
                raise ValueError("attribute spans must be disjoint and contiguous")
            pos = hi
        if self.category[1] - self.category[0] != len(CATEGORIES):
            raise ValueError("category span must have one channel per category")

    @property
    def n_channels(self):
        return max(self.category[1], self.direction[1], self.log_speed[1], self.stationary[1])

    def to_dict(self):
        return {"category": list(self.category), "direction": list(self.direction),
                "log_speed": list(self.log_speed), "stationary": list(self.stationary)}

    def channels(self, category, orientation, speed, stationary, speed_base=1.5):
        """Active channels for one observation."""
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        out = [self.category[0] + CATEGORIES.index(category)]
        if stationary or speed is None or speed < speed_base:
            out.append(self.stationary[0])
        else:
            out.append(self.direction[0] + orientation_bin(orientation))
            out.append(self.log_speed[0] + quantize_log_speed(speed, speed_base))
        return out


DEFAULT_LAYOUT = AttributeLayout()


class ActivityHeatmap:
    """H x W x D accumulator of Gaussian-weighted attribute evidence.

    ``sigma=None`` selects the adaptive kernel width ``max(w, h) / 4`` of each
    observation's box; a number fixes it.
    """

    def __init__(self, height, width, layout=DEFAULT_LAYOUT, sigma=None):
        if height < 1 or width < 1:
            raise ValueError("heatmap dimensions must be positive")
        if sigma is not None and not sigma > 0:
            raise ValueError("sigma must be > 0")
        self.height = int(height)
        self.width = int(width)
        self.layout = layout
        self.sigma = sigma
        self.data = np.zeros((self.height, self.width, layout.n_channels))

    @property
    def channels(self):
        return self.layout.n_channels

    def kernel_sigma(self, box):
        if self.sigma is not None:
            return float(self.sigma)
        return max(box.width, box.height, 1e-6) / 4.0

    def deposit(self, box, channels, center=None):
        box = Box(*box)
        xc, yc = center if center is not None else box.center
        if not (0 <= xc < self.width and 0 <= yc < self.height):
            raise ValueError(f"observation centre ({xc}, {yc}) is outside the frame")
        x_lo, x_hi, y_lo, y_hi = box.pixel_range(self.width, self.height)
        kernels.deposit(self.data, x_lo, x_hi, y_lo, y_hi, xc, yc, self.kernel_sigma(box),
                        np.asarray(channels, dtype=np.int64))

    def copy(self):
        out = ActivityHeatmap(self.height, self.width, self.layout, self.sigma)
        out.data = self.data.copy()
        return out


def accumulate(heatmap, obs, motion=None):
    """Deposit one per-frame observation into ``heatmap`` (in place) and return it.

    ``motion`` is an ``(orientation, speed, stationary)`` triple; when omitted
    the observation's own fields are used.
    """
    if motion is None:
        motion = (obs.orientation, obs.speed, obs.stationary)
    orientation, speed, stationary = motion
    channels = heatmap.layout.channels(obs.category, orientation, speed, stationary)
    heatmap.deposit(obs.box, channels)
    return heatmap


def accumulate_tracklets(heatmap, tracklets):
    """Deposit every observation of every tracklet using the tracklet's motion feature."""
    for t in tracklets:
        f = t.feature
        motion = (f.orientation, f.speed, f.speed == 0.0)
        for obs in t.observations:
            if not (0 <= obs.box.center[0] < heatmap.width and 0 <= obs.box.center[1] < heatmap.height):
                continue
            channels = heatmap.layout.channels(f.category, *motion)
            heatmap.deposit(obs.box, channels)
    return heatmap


def pixel_features(heatmap, min_mass=1e-3):
    """Active pixel coordinates (row, col) and their L1-normalised attribute vectors.

    A pixel is active when its channel sum is at least ``min_mass``. Returns
    empty arrays when nothing is active.
    """
    mass = heatmap.data.sum(axis=2)
    active = mass >= min_mass
    coords = np.argwhere(active)
    feats = heatmap.data[active] / mass[active][:, None]
    return coords, feats


@dataclass
class RegionMap:
    labels: np.ndarray  # (H, W) ints in [0, K)
    K: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError("labels must be an H x W raster")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ValueError("labels must lie in [0, K)")
        present = np.unique(self.labels)
        if present.size != self.K:
            raise ValueError(f"only {present.size} of {self.K} region labels are present")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def label_at(self, x, y):
        return int(self.labels[y, x])

    def counts(self):
        return np.bincount(self.labels.ravel(), minlength=self.K)

    def content_hash(self):
        """SHA-256 over shape, K and the label raster; binds model sets to maps."""
        h = hashlib.sha256(f"{self.height}x{self.width}:{self.K}:".encode("ascii"))
        h.update(self.labels.astype("<i4").tobytes())
        return h.hexdigest()


def _fill_inactive(active, labels_active, coords):
    """Label every pixel with the label of its nearest active pixel.

    Exact distance ties prefer the smaller label, then the earlier active
    pixel in row-major order.
    """
    h, w = active.shape
    out = np.full((h, w), -1, dtype=np.int64)
    out[coords[:, 0], coords[:, 1]] = labels_active
    todo = np.argwhere(~active)
    if todo.size == 0:
        return out
    tree = cKDTree(coords)
    n_act = coords.shape[0]
    pending = np.arange(todo.shape[0])
    k = min(8, n_act)
    while pending.size:
        d, idx = tree.query(todo[pending], k=k)
        d = d.reshape(len(pending), -1)
        idx = idx.reshape(len(pending), -1)
        # integer grid coordinates make squared distances exact, so ties are exact
        tied = d == d[:, :1]
        unresolved = tied[:, -1] & (k < n_act)
        done = ~unresolved
        if done.any():
            lab = labels_active[np.minimum(idx[done], n_act - 1)]
            key = np.where(tied[done], lab * n_act + idx[done], np.iinfo(np.int64).max)
            best = idx[done][np.arange(done.sum()), np.argmin(key, axis=1)]
            pts = todo[pending[done]]
            out[pts[:, 0], pts[:, 1]] = labels_active[best]
        pending = pending[unresolved]
        k = min(2 * k, n_act)
    return out


def _relabel_by_size(labels, K):
    counts = np.bincount(labels.ravel(), minlength=K)
    order = sorted((i for i in range(K) if counts[i] > 0), key=lambda i: (-counts[i], i))
    mapping = np.full(K, -1, dtype=np.int64)
    mapping[order] = np.arange(len(order))
    return mapping[labels], len(order), mapping


def _region_separation(points, labels, K, ridge):
    """Mean pairwise symmetric KL between per-region Gaussians in clustering space."""
    models, sets = [], []
    dim = points.shape[1]
    for r in range(K):
        pts = points[labels == r]
        if pts.shape[0] == 0:
            continue
        mean = pts.mean(axis=0)
        diff = pts - mean
        cov = diff.T @ diff / pts.shape[0]
        cov = 0.5 * (cov + cov.T) + max(ridge, 1e-12) * np.eye(dim)
        models.append(gmm.GaussianMixture([1.0], mean[None], cov[None], "full"))
        sets.append(pts)
    if len(models) < 2:
        return 0.0
    return gmm.mean_pairwise_divergence(models, sets)


def discover_regions(heatmap, K, spatial_affinity=0.0, method="gmm-full", subsample=200_000,
                     seed=0, em_config=None, min_mass=1e-3):
    """Cluster active pixels into ``K`` regions and label the whole frame.

    The mixture (or k-means) is fitted on a seeded uniform subsample of at
    most ``subsample`` active-pixel vectors, then every active pixel is
    assigned by maximum posterior (nearest centroid for k-means). Inactive
    pixels take the label of the nearest active pixel, and labels are finally
    renumbered by descending region size.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if method not in CLUSTER_METHODS:
        raise ValueError(f"unknown clustering method {method!r}")
    if spatial_affinity < 0:
        raise ValueError("spatial_affinity must be >= 0")
    em_config = em_config or gmm.EmConfig(seed=seed)
    coords, feats = pixel_features(heatmap, min_mass)
    n_active = coords.shape[0]
    if n_active < K:
        raise ValueError(f"only {n_active} active pixels for K={K} regions")
    if spatial_affinity > 0:
        xy = np.column_stack([coords[:, 1] / heatmap.width, coords[:, 0] / heatmap.height])
        feats = np.hstack([feats, spatial_affinity * xy])
    rng = np.random.default_rng(seed)
    if n_active > subsample:
        sub_idx = np.sort(rng.choice(n_active, size=subsample, replace=False))
    else:
        sub_idx = np.arange(n_active)
    sub = feats[sub_idx]
    if method == "kmeans":
        centers, _, _ = gmm.kmeans(sub, K, seed=seed, n_restarts=em_config.n_restarts)
        labels_active = np.argmin(gmm._sq_dist(feats, centers), axis=1)
        mode = None
    else:
        mode = _METHOD_MODES[method]
        model = gmm.fit_em(sub, K, mode, em_config)
        labels_active = model.predict(feats)
    active = np.zeros((heatmap.height, heatmap.width), dtype=bool)
    active[coords[:, 0], coords[:, 1]] = True
    full = _fill_inactive(active, labels_active, coords)
    labels, k_eff, mapping = _relabel_by_size(full, K)
    sep = _region_separation(sub, mapping[labels_active[sub_idx]], k_eff, em_config.ridge)
    provenance = {
        "seed": int(seed),
        "K": int(K),
        "k_effective": int(k_eff),
        "method": method,
        "covariance_mode": mode,
        "spatial_affinity": float(spatial_affinity),
        "mu_kl": float(sep),
        "subsample_size": int(sub_idx.size),
        "n_active": int(n_active),
    }
    return RegionMap(labels, k_eff, provenance)


def grid_region_map(height, width, cell=80):
    """Rectangular grid baseline; partial border cells are regions of their own."""
    if cell < 1:
        raise ValueError("cell must be >= 1")
    n_cols = math.ceil(width / cell)
    ys = np.arange(height)[:, None] // cell
    xs = np.arange(width)[None, :] // cell
    labels = ys * n_cols + xs
    K = int(math.ceil(height / cell) * n_cols)
    return RegionMap(labels, K, {"method": "grid", "cell": int(cell), "K": K})


@dataclass
class SelectKResult:
    best_k: int
    table: list  # [(K, mu_kl)]
    region_maps: dict
    model_sets: dict


def region_divergence(model_set, grouped):
    """Mean pairwise symmetric KL between regional models, over their training samples.

    Regions without training samples contribute zero divergence but still
    count in the ``K (K - 1)`` normaliser.
    """
    K = model_set.K
    if K < 2:
        return 0.0
    present = [r for r in range(K) if len(grouped.get(r, ())) > 0]
    if len(present) < 2:
        return 0.0
    models = [model_set.model_for(r) for r in present]
    kl = gmm.pairwise_kl_matrix(models, [np.asarray(grouped[r]) for r in present])
    total = 0.0
    n = len(present)
    for i in range(n):
        for j in range(n):
            if i != j:
                total += kl[i, j] + kl[j, i]
    return total / (K * (K - 1))


def select_k(heatmap, tracklets, k_candidates, *, method="gmm-full", spatial_affinity=0.0,
             subsample=200_000, seed=0, em_config=None, k_max=20, min_samples=50):
    """Pick the number of regions maximising the mean pairwise regional divergence.

    For each candidate K the frame is partitioned, regional normalcy models are
    trained on ``tracklets`` and their divergence is measured on each region's
    own training features. Ties go to the smaller K; failing candidates are
    recorded with ``-inf``.
    """
    from regionvad import normalcy

    if not k_candidates:
        raise ValueError("k_candidates must be non-empty")
    if any(k < 2 for k in k_candidates):
        raise ValueError("every candidate K must be >= 2")
    em_config = em_config or gmm.EmConfig(seed=seed)
    table, maps, sets = [], {}, {}
    best_k, best_mu = None, -math.inf
    for K in sorted(set(k_candidates)):
        try:
            rmap = discover_regions(heatmap, K, spatial_affinity, method, subsample, seed, em_config)
            grouped = normalcy.group_features(tracklets, rmap)
            model_set = normalcy.train_regional_models(grouped, rmap, k_max=k_max,
                                                       min_samples=min_samples, config=em_config)
            mu = region_divergence(model_set, grouped)
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("select_k: K=%d failed: %s", K, exc)
            table.append((K, -math.inf))
            continue
        logger.info("select_k: K=%d mu_kl=%.6g", K, mu)
        table.append((K, mu))
        maps[K], sets[K] = rmap, model_set
        if best_k is None or mu > best_mu:
            best_k, best_mu = K, mu
    if best_k is None:
        raise ValueError("every candidate K failed")
    return SelectKResult(best_k, table, maps, sets)


def label_color(label):
    """Deterministic, label-unique RGB colour."""
    code = ((int(label) + 1) * 2654435761) & 0xFFFFFF
    return ((code >> 16) & 0xFF, (code >> 8) & 0xFF, code & 0xFF)


def default_palette(K):
    return [label_color(i) for i in range(K)]


def render_region_map(region_map, palette=None):
    """Colour raster of the region labels as binary PPM (P6) bytes."""
    palette = list(palette) if palette is not None else default_palette(region_map.K)
    if len(palette) < region_map.K:
        raise ValueError("palette has fewer colours than regions")
    lut = np.array(palette, dtype=np.uint8).reshape(-1, 3)
    rgb = lut[region_map.labels]
    header = f"P6\n{region_map.width} {region_map.height}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def decode_rendered(data, palette):
    """Inverse of :func:`render_region_map` for a known palette."""
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a P6 raster written by render_region_map")
    w, h = (int(v) for v in parts[1].split())
    rgb = np.frombuffer(parts[3], dtype=np.uint8)
    if rgb.size != w * h * 3:
        raise ValueError("pixel payload has the wrong size")
    codes = rgb.reshape(h, w, 3).astype(np.int64) @ np.array([65536, 256, 1])
    lut = {r * 65536 + g * 256 + b: i for i, (r, g, b) in enumerate(palette)}
    labels = np.vectorize(lambda c: lut.get(int(c), -1))(codes) if codes.size else codes
    if np.any(labels < 0):
        raise ValueError("raster contains colours outside the palette")
    return labels
