"""Ground-truthed synthetic data: the tabular rule toy and a zoned street-scene simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from regionvad.evaluation import GroundTruthAnnotation
from regionvad.motion import FlowField
from regionvad.records import CATEGORIES, Box, Observation

# ---------------------------------------------------------------------------
# Tabular toy
# ---------------------------------------------------------------------------

TOY_REGIONS = ("walkway", "bicycle lane", "car lane", "park lane")
TOY_OBJECTS = ("car", "person", "cyclist")
TOY_SPEEDS = ("fast", "medium", "slow")


@dataclass(frozen=True)
class ToyRuleSet:
    """Rule-based joint over (Region, Object, Speed).

    ``P(object | region)`` and ``P(speed | object)`` start from the default
    marginals. A hint fixes one entry and spreads the remainder over the
    other entries in proportion to their defaults. Constraints then override
    single entries (a zero forbids the pair) and each row is renormalised.
    """

    regions: tuple = TOY_REGIONS
    objects: tuple = TOY_OBJECTS
    speeds: tuple = TOY_SPEEDS
    region_object_hints: dict = field(default_factory=lambda: {
        ("walkway", "person"): 1.0,
        ("bicycle lane", "cyclist"): 1.0,
        ("car lane", "car"): 0.8,
        ("park lane", "person"): 0.3,
    })
    object_speed_hints: dict = field(default_factory=lambda: {
        ("car", "fast"): 0.8,
        ("person", "slow"): 0.7,
        ("cyclist", "medium"): 0.9,
    })
    region_object_constraints: dict = field(default_factory=lambda: {
        ("walkway", "car"): 0.0,
        ("bicycle lane", "car"): 0.0,
        ("car lane", "person"): 0.0,
        ("park lane", "cyclist"): 0.0,
    })
    object_speed_constraints: dict = field(default_factory=lambda: {
        ("car", "slow"): 0.0,
        ("person", "fast"): 0.0,
        ("cyclist", "fast"): 0.1,
    })
    region_prior: tuple = (0.25, 0.25, 0.25, 0.25)
    object_prior: tuple = (0.33, 0.33, 0.34)
    speed_prior: tuple = (0.3, 0.5, 0.2)

    def __post_init__(self):
        for name, table in (("hint", self.region_object_hints), ("hint", self.object_speed_hints),
                            ("constraint", self.region_object_constraints),
                            ("constraint", self.object_speed_constraints)):
            for key, p in table.items():
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"{name} probability for {key} is outside [0, 1]")
        for prior, names in ((self.region_prior, self.regions), (self.object_prior, self.objects),
                             (self.speed_prior, self.speeds)):
            if len(prior) != len(names) or min(prior) < 0 or sum(prior) <= 0:
                raise ValueError("default marginals must be non-negative and match the domains")

    @property
    def dimension(self):
        return len(self.regions) + len(self.objects) + len(self.speeds)

    def region_probs(self):
        p = np.asarray(self.region_prior, dtype=np.float64)
        return p / p.sum()

    def object_given_region(self):
        return _conditional(self.regions, self.objects, self.object_prior,
                            self.region_object_hints, self.region_object_constraints)

    def speed_given_object(self):
        return _conditional(self.objects, self.speeds, self.speed_prior,
                            self.object_speed_hints, self.object_speed_constraints)

    def supported(self, region, obj, speed):
        """True when the triple has non-zero probability under the rules."""
        return bool(self.object_given_region()[region, obj] > 0
                    and self.speed_given_object()[obj, speed] > 0)

    def encode(self, triples):
        """Concatenated one-hots (region, object, speed) for integer index triples."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        nr, no = len(self.regions), len(self.objects)
        out = np.zeros((triples.shape[0], self.dimension))
        rows = np.arange(triples.shape[0])
        out[rows, triples[:, 0]] = 1.0
        out[rows, nr + triples[:, 1]] = 1.0
        out[rows, nr + no + triples[:, 2]] = 1.0
        return out


def _conditional(parents, children, prior, hints, constraints):
    prior = np.asarray(prior, dtype=np.float64)
    table = np.empty((len(parents), len(children)))
    for i, a in enumerate(parents):
        row = prior / prior.sum()
        hinted = [(children.index(b), p) for (pa, b), p in hints.items() if pa == a]
        if hinted:
            fixed = np.zeros(len(children), dtype=bool)
            row = row.copy()
            for j, p in hinted:
                row[j] = p
                fixed[j] = True
            rest = max(0.0, 1.0 - row[fixed].sum())
            free_mass = prior[~fixed].sum()
            row[~fixed] = rest * prior[~fixed] / free_mass if free_mass > 0 else 0.0
        for (pa, b), p in constraints.items():
            if pa == a:
                row[children.index(b)] = p
        total = row.sum()
        if total <= 0:
            raise ValueError(f"rules leave no probability mass for {a!r}")
        table[i] = row / total
    return table


@dataclass
class ToyData:
    train: np.ndarray  # (n_train, 10) one-hot rows
    test: np.ndarray  # (n_test, 10)
    test_labels: np.ndarray  # 1 = anomalous
    train_triples: np.ndarray
    test_triples: np.ndarray


def _sample_joint(rules, n, rng):
    r = rng.choice(len(rules.regions), size=n, p=rules.region_probs())
    po = rules.object_given_region()
    ps = rules.speed_given_object()
    # inverse-CDF draws keep the stream layout independent of the row tables
    o = (rng.random(n)[:, None] > np.cumsum(po[r], axis=1)[:, :-1]).sum(axis=1)
    s = (rng.random(n)[:, None] > np.cumsum(ps[o], axis=1)[:, :-1]).sum(axis=1)
    return np.stack([r, o, s], axis=1)


def generate_toy(rules=None, n_train=10_000, n_test=20_000, seed=0):
    """Training samples from the rule joint and a half-normal/half-free test set.

    The free half keeps the region prior but draws object and speed uniformly;
    its labels come from re-checking the rules, so free samples that happen to
    be supported are labelled normal.
    """
    rules = rules or ToyRuleSet()
    if n_train < 0 or n_test < 0:
        raise ValueError("sample counts must be >= 0")
    rng = np.random.default_rng(seed)
    train = _sample_joint(rules, n_train, rng)
    n_norm = n_test // 2
    normal = _sample_joint(rules, n_norm, rng)
    n_free = n_test - n_norm
    free = np.stack([
        rng.choice(len(rules.regions), size=n_free, p=rules.region_probs()),
        rng.integers(0, len(rules.objects), size=n_free),
        rng.integers(0, len(rules.speeds), size=n_free),
    ], axis=1) if n_free else np.empty((0, 3), dtype=np.int64)
    test = np.concatenate([normal, free]).astype(np.int64)
    po, ps = rules.object_given_region(), rules.speed_given_object()
    ok = (po[test[:, 0], test[:, 1]] > 0) & (ps[test[:, 1], test[:, 2]] > 0) if len(test) else \
        np.empty(0, dtype=bool)
    labels = (~ok).astype(np.int8)
    return ToyData(rules.encode(train), rules.encode(test), labels, train, test)


# ---------------------------------------------------------------------------
# Street-scene simulator
# ---------------------------------------------------------------------------

CATEGORY_SIZES = {  # (width, height) in pixels
    "person": (6.0, 12.0),
    "bicycle": (8.0, 12.0),
    "car": (14.0, 20.0),
    "motorcycle": (8.0, 14.0),
}
ANOMALY_KINDS = ("wrong-category", "wrong-direction", "overspeed", "cross-zone-path")


@dataclass(frozen=True)
class Zone:
    """Axis-aligned activity zone with its normal traffic profile."""

    rect: tuple  # (x1, y1, x2, y2)
    categories: dict  # category -> probability
    heading: float  # radians, image coordinates (y down)
    speed_mean: float  # px / frame
    speed_log_sigma: float = 0.05
    spawn_rate: float = 2.0  # objects per 100 frames
    stationary_fraction: float = 0.0
    heading_jitter: float = 0.03  # radians, per frame

    def __post_init__(self):
        x1, y1, x2, y2 = self.rect
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"zone rectangle {self.rect} is empty")
        if any(c not in CATEGORIES for c in self.categories):
            raise ValueError("zone categories must be known categories")
        if abs(sum(self.categories.values()) - 1.0) > 1e-9 or min(self.categories.values()) < 0:
            raise ValueError("zone category distribution must sum to 1")
        if self.speed_mean <= 0 or min(self.speed_log_sigma, self.spawn_rate, self.heading_jitter) < 0:
            raise ValueError("speed and spawn parameters must be positive")
        if not 0.0 <= self.stationary_fraction <= 1.0:
            raise ValueError("stationary_fraction must lie in [0, 1]")

    def allows(self, category):
        return self.categories.get(category, 0.0) > 0.0

    def contains(self, x, y):
        x1, y1, x2, y2 = self.rect
        return x1 <= x < x2 and y1 <= y < y2


@dataclass(frozen=True)
class SceneLayout:
    height: int
    width: int
    zones: tuple

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("frame size must be positive")
        for z in self.zones:
            x1, y1, x2, y2 = z.rect
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ValueError(f"zone {z.rect} exceeds the {self.width}x{self.height} frame")

    def zone_raster(self):
        """Zone index per pixel (later zones win overlaps); -1 where no zone applies."""
        out = np.full((self.height, self.width), -1, dtype=np.int64)
        for i, z in enumerate(self.zones):
            x_lo, x_hi, y_lo, y_hi = Box(*z.rect).pixel_range(self.width, self.height)
            out[y_lo:y_hi, x_lo:x_hi] = i
        return out

    def zone_at(self, x, y):
        hit = -1
        for i, z in enumerate(self.zones):
            if z.contains(x, y):
                hit = i
        return hit

    def has_gaps(self):
        return bool((self.zone_raster() < 0).any())


def four_zone_layout(height=96, width=128):
    """Four vertical lanes with overlapping category pairs and alternating headings.

    Neighbouring lanes share one category, so no lane's traffic is covered
    by another lane alone.
    """
    w = width / 4.0
    return SceneLayout(height, width, (
        Zone((0.0, 0.0, w, height), {"person": 0.5, "bicycle": 0.5}, math.pi / 2, 1.8),
        Zone((w, 0.0, 2 * w, height), {"bicycle": 0.5, "car": 0.5}, 3 * math.pi / 2, 3.0),
        Zone((2 * w, 0.0, 3 * w, height), {"car": 0.5, "motorcycle": 0.5}, math.pi / 2, 4.5),
        Zone((3 * w, 0.0, width, height), {"motorcycle": 0.5, "person": 0.5}, 3 * math.pi / 2, 6.5),
    ))


def two_lane_layout(height=96, width=128):
    """Opposite-direction traffic lanes; the same category with different headings."""
    h = height / 2.0
    return SceneLayout(height, width, (
        Zone((0.0, 0.0, width, h), {"car": 0.8, "motorcycle": 0.2}, math.pi, 4.0),
        Zone((0.0, h, width, height), {"car": 0.8, "motorcycle": 0.2}, 0.0, 4.0),
    ))


def three_zone_layout(height=96, width=144):
    """Three lanes separated by empty medians; neighbouring lanes share one category."""
    gap = width / 12.0
    w = (width - 2 * gap) / 3.0
    x1, x2 = w + gap, 2 * w + 2 * gap
    return SceneLayout(height, width, (
        Zone((0.0, 0.0, w, height), {"person": 0.5, "bicycle": 0.5}, math.pi / 2, 3.0),
        Zone((x1, 0.0, x1 + w, height), {"bicycle": 0.5, "motorcycle": 0.5}, 3 * math.pi / 2, 3.0),
        Zone((x2, 0.0, width, height), {"motorcycle": 0.5, "car": 0.5}, math.pi / 2, 3.0),
    ))


LAYOUTS = {"four-zone": four_zone_layout, "two-lane": two_lane_layout,
           "three-zone": three_zone_layout}


@dataclass(frozen=True)
class AnomalySpec:
    rate: float = 0.0
    kinds: tuple = ANOMALY_KINDS

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"anomaly rate {self.rate} is outside [0, 1]")
        bad = [k for k in self.kinds if k not in ANOMALY_KINDS]
        if bad:
            raise ValueError(f"unknown anomaly kinds {bad}")
        if self.rate > 0 and not self.kinds:
            raise ValueError("a positive anomaly rate needs at least one kind")


@dataclass
class SynthOutput:
    video_id: str
    n_frames: int
    layout: SceneLayout
    observations: list  # Observation records ordered by (track_id, frame)
    annotations: list  # GroundTruthAnnotation records
    region_raster: np.ndarray
    velocities: dict  # (track_id, frame) -> (vx, vy)
    track_kinds: dict  # track_id -> "normal" or an anomaly kind
    config: dict


# Relative per-frame speed jitter and box position noise (pixels).
SPEED_JITTER = 0.05
POSITION_JITTER = 0.3


def _fits(cx, cy, bw, bh, rect):
    x1, y1, x2, y2 = rect
    return cx - bw / 2 >= x1 and cx + bw / 2 <= x2 and cy - bh / 2 >= y1 and cy + bh / 2 <= y2


def _entry_point(rect, bw, bh, heading, rng):
    """Box centre on the upstream edge of ``rect`` for travel along ``heading``."""
    x1, y1, x2, y2 = rect
    lo_x, hi_x = x1 + bw / 2, x2 - bw / 2
    lo_y, hi_y = y1 + bh / 2, y2 - bh / 2
    if lo_x > hi_x or lo_y > hi_y:
        return None
    cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
    dx, dy = math.cos(heading), math.sin(heading)
    # walk back against the heading until the box would leave the rectangle
    t = math.inf
    if dx > 1e-12:
        t = min(t, (cx - lo_x) / dx)
    elif dx < -1e-12:
        t = min(t, (cx - hi_x) / dx)
    if dy > 1e-12:
        t = min(t, (cy - lo_y) / dy)
    elif dy < -1e-12:
        t = min(t, (cy - hi_y) / dy)
    if not math.isfinite(t):
        t = 0.0
    return cx - t * dx, cy - t * dy


@dataclass
class _Track:
    track_id: int
    zone: int
    category: str
    kind: str
    cx: float
    cy: float
    heading: float
    speed: float
    bounds: tuple  # rectangle the box must stay inside
    stationary_frames: int = 0


def _plan_track(layout, zi, track_id, kind, rng):
    zone = layout.zones[zi]
    cats = list(zone.categories)
    probs = np.array([zone.categories[c] for c in cats])
    category = cats[int(rng.choice(len(cats), p=probs / probs.sum()))]
    heading, speed_mean, bounds = zone.heading, zone.speed_mean, zone.rect
    if kind == "wrong-category":
        banned = [c for c in CATEGORIES if not zone.allows(c)]
        if not banned:
            kind = "wrong-direction"
        else:
            category = banned[int(rng.integers(len(banned)))]
    if kind == "wrong-direction":
        heading = (heading + math.pi) % (2 * math.pi)
    elif kind == "overspeed":
        speed_mean *= 3.0
    elif kind == "cross-zone-path":
        # perpendicular walk across the frame, towards the larger side
        zx = 0.5 * (zone.rect[0] + zone.rect[2])
        zy = 0.5 * (zone.rect[1] + zone.rect[3])
        left = (heading + math.pi / 2) % (2 * math.pi)
        right = (heading - math.pi / 2) % (2 * math.pi)
        fx, fy = layout.width / 2 - zx, layout.height / 2 - zy
        heading = left if math.cos(left) * fx + math.sin(left) * fy >= 0 else right
        bounds = (0.0, 0.0, float(layout.width), float(layout.height))
    bw, bh = CATEGORY_SIZES[category]
    start = _entry_point(zone.rect, bw, bh, heading, rng)
    if start is None:
        return None
    cx, cy = start
    mu = math.log(speed_mean) - 0.5 * zone.speed_log_sigma ** 2
    speed = float(np.exp(rng.normal(mu, zone.speed_log_sigma)))
    track = _Track(track_id, zi, category, kind, cx, cy, heading % (2 * math.pi), speed, bounds)
    if kind == "normal" and zone.stationary_fraction > 0 and rng.random() < zone.stationary_fraction:
        lo_x, hi_x = zone.rect[0] + bw / 2, zone.rect[2] - bw / 2
        lo_y, hi_y = zone.rect[1] + bh / 2, zone.rect[3] - bh / 2
        track.cx, track.cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        track.stationary_frames = int(rng.integers(20, 80))
    return track


def simulate_scene(layout, n_frames, anomaly=None, seed=0, video_id="scene"):
    """Simulate tracked objects moving through the zones of ``layout``.

    Every zone spawns objects at its rate (Poisson per frame). Each new track
    is anomalous with probability ``anomaly.rate``, with the kind drawn
    uniformly from ``anomaly.kinds``. Anomalous tracks are annotated on every
    frame, except cross-zone paths, which are annotated only while the box
    centre lies in a zone that does not admit the object's category.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    anomaly = anomaly or AnomalySpec()
    if not isinstance(anomaly, AnomalySpec):
        anomaly = AnomalySpec(**anomaly)
    rng = np.random.default_rng(seed)
    active, finished = [], []
    next_id = 0
    per_track = {}
    velocities = {}
    for frame in range(n_frames):
        for zi, zone in enumerate(layout.zones):
            for _ in range(int(rng.poisson(zone.spawn_rate / 100.0))):
                kind = "normal"
                if anomaly.rate > 0 and rng.random() < anomaly.rate:
                    kind = anomaly.kinds[int(rng.integers(len(anomaly.kinds)))]
                t = _plan_track(layout, zi, next_id, kind, rng)
                if t is not None:
                    active.append(t)
                    per_track[next_id] = []
                    next_id += 1
        still = []
        for t in active:
            bw, bh = CATEGORY_SIZES[t.category]
            jx, jy = rng.normal(0.0, POSITION_JITTER, size=2)
            if t.stationary_frames > 0:
                box = Box(t.cx - bw / 2 + jx * 0.1, t.cy - bh / 2 + jy * 0.1,
                          t.cx + bw / 2 + jx * 0.1, t.cy + bh / 2 + jy * 0.1)
                per_track[t.track_id].append(Observation(video_id, t.track_id, frame,
                                                         _clip_box(box, layout), t.category,
                                                         None, None, True))
                velocities[(t.track_id, frame)] = (0.0, 0.0)
                t.stationary_frames -= 1
                if t.stationary_frames > 0:
                    still.append(t)
                else:
                    finished.append(t)
                continue
            ang = t.heading + rng.normal(0.0, layout.zones[t.zone].heading_jitter)
            spd = t.speed * max(0.2, 1.0 + rng.normal(0.0, SPEED_JITTER))
            vx, vy = spd * math.cos(ang), spd * math.sin(ang)
            box = Box(t.cx - bw / 2 + jx, t.cy - bh / 2 + jy, t.cx + bw / 2 + jx, t.cy + bh / 2 + jy)
            per_track[t.track_id].append(Observation(
                video_id, t.track_id, frame, _clip_box(box, layout), t.category,
                math.atan2(vy, vx) % (2 * math.pi), math.hypot(vx, vy), False))
            velocities[(t.track_id, frame)] = (vx, vy)
            t.cx += vx
            t.cy += vy
            if _fits(t.cx, t.cy, bw, bh, t.bounds):
                still.append(t)
            else:
                finished.append(t)
        active = still
    kinds = {}
    observations, annotations = [], []
    for t in sorted(finished + active, key=lambda t: t.track_id):
        kinds[t.track_id] = t.kind
        for o in per_track[t.track_id]:
            observations.append(o)
            if _annotated(layout, t, o):
                annotations.append(GroundTruthAnnotation(video_id, o.frame, o.box, t.track_id))
    config = {"seed": seed, "n_frames": n_frames, "anomaly_rate": anomaly.rate,
              "anomaly_kinds": list(anomaly.kinds), "video_id": video_id,
              "height": layout.height, "width": layout.width, "n_zones": len(layout.zones)}
    return SynthOutput(video_id, n_frames, layout, observations, annotations,
                       layout.zone_raster(), velocities, kinds, config)


def _clip_box(box, layout):
    b = box.clamp(layout.width, layout.height)
    return Box(*(float(v) for v in b))


def _annotated(layout, track, obs):
    if track.kind == "normal":
        return False
    if track.kind != "cross-zone-path":
        return True
    zi = layout.zone_at(*obs.box.center)
    return zi >= 0 and not layout.zones[zi].allows(track.category)


def emit_flow_rasters(output, frames):
    """Flow rasters with each object's box filled by its velocity.

    Boxes are painted in track order, so a later-spawned object overwrites an
    earlier one where they overlap.
    """
    by_frame = {}
    for o in output.observations:
        by_frame.setdefault(o.frame, []).append(o)
    out = {}
    for f in frames:
        if not 0 <= f < output.n_frames:
            raise ValueError(f"frame {f} is outside the simulated range")
        u = np.zeros((output.layout.height, output.layout.width))
        v = np.zeros_like(u)
        for o in sorted(by_frame.get(f, ()), key=lambda o: o.track_id):
            x_lo, x_hi, y_lo, y_hi = o.box.pixel_range(output.layout.width, output.layout.height)
            vx, vy = output.velocities[(o.track_id, f)]
            u[y_lo:y_hi, x_lo:x_hi] = vx
            v[y_lo:y_hi, x_lo:x_hi] = vy
        out[f] = FlowField(u, v)
    return out
