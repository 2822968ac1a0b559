"""Readers and writers for every interchange artifact.

Text formats are UTF-8, line-delimited where applicable, with a fixed key
order and reals written with 17 significant digits so identical inputs give
identical bytes. Single-document JSON artifacts carry a SHA-256 checksum of
their canonical body; region maps are a binary graymap plus a JSON sidecar.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from regionvad import gmm, normalcy
from regionvad.errors import FormatError, ValidationError
from regionvad.evaluation import GroundTruthAnnotation
from regionvad.motion import FlowField
from regionvad.records import CATEGORIES, Box, Observation
from regionvad.regions import DEFAULT_LAYOUT, RegionMap, default_palette
from regionvad.scoring import TrackletScore

FLO_MAGIC = 202021.25
FLO_MAX_SIDE = 1 << 16
MAX_PGM_LABELS = 256


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _fmt_float(x):
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x}")
    # "-0" would parse back as the integer 0, so zero is always written unsigned
    return format(x if x != 0.0 else 0.0, ".17g")


def dumps(obj):
    """Compact JSON with insertion-ordered keys and 17-significant-digit reals."""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k), ensure_ascii=False)}:{dumps(v)}"
                              for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def _finite_float(text):
    x = float(text)
    if not math.isfinite(x):
        raise ValueError(f"real literal {text} overflows")
    return x


def loads(text):
    return json.loads(text, parse_constant=_reject_constant, parse_float=_finite_float)


def _checksum(body):
    return hashlib.sha256(dumps(body).encode("utf-8")).hexdigest()


def write_document(path, kind, payload):
    """Write a checksummed JSON document ``{"format": kind, ..., "checksum": ...}``."""
    body = {"format": kind, "version": 1}
    body.update(payload)
    body["checksum"] = _checksum(body)
    data = (dumps(body) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return data


def read_document(path, kind):
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
        doc = loads(text)
    except (UnicodeDecodeError, ValueError) as exc:
        pos = getattr(exc, "pos", None) if not isinstance(exc, UnicodeDecodeError) else exc.start
        raise FormatError(f"{path}: not a valid JSON document: {exc}", pos or 0) from None
    if not isinstance(doc, dict) or doc.get("format") != kind:
        raise FormatError(f"{path}: expected a {kind!r} document", 0)
    stated = doc.pop("checksum", None)
    if stated != _checksum(doc):
        raise FormatError(f"{path}: checksum mismatch", 0)
    if raw != (dumps({**doc, "checksum": stated}) + "\n").encode("utf-8"):
        raise FormatError(f"{path}: document is not in canonical form", 0)
    return doc


# ---------------------------------------------------------------------------
# tracklet records
# ---------------------------------------------------------------------------

def _obs_record(o):
    return {"video_id": o.video_id, "track_id": o.track_id, "frame": o.frame,
            "box": [float(v) for v in o.box], "category": o.category,
            "orientation": None if o.orientation is None else float(o.orientation),
            "speed": None if o.speed is None else float(o.speed),
            "stationary": bool(o.stationary)}


def write_observations(path, observations):
    lines = [dumps(_obs_record(o)) for o in observations]
    data = "".join(line + "\n" for line in lines).encode("utf-8")
    Path(path).write_bytes(data)
    return data


_OBS_KEYS = ("video_id", "track_id", "frame", "box", "category", "orientation", "speed",
             "stationary")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _parse_observation(rec, allow_missing_motion):
    if not isinstance(rec, dict):
        return None, "record is not an object"
    if tuple(rec) != _OBS_KEYS:
        return None, f"expected keys {list(_OBS_KEYS)}"
    if not isinstance(rec["video_id"], str) or not rec["video_id"]:
        return None, "video_id must be a non-empty string"
    if not _is_int(rec["track_id"]) or not _is_int(rec["frame"]) or rec["frame"] < 0:
        return None, "track_id and frame must be integers (frame >= 0)"
    box = rec["box"]
    if not (isinstance(box, list) and len(box) == 4 and all(_is_real(v) for v in box)):
        return None, "box must be four finite reals"
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        return None, f"degenerate box {box}"
    if rec["category"] not in CATEGORIES:
        return None, f"unknown category {rec['category']!r}"
    if not isinstance(rec["stationary"], bool):
        return None, "stationary must be a boolean"
    ori, spd = rec["orientation"], rec["speed"]
    for name, v in (("orientation", ori), ("speed", spd)):
        if v is not None and not _is_real(v):
            return None, f"{name} must be a finite real or null"
    if ori is not None and not 0.0 <= ori < 2 * math.pi:
        return None, "orientation must lie in [0, 2pi)"
    if spd is not None and spd < 0:
        return None, "speed must be >= 0"
    if (ori is None or spd is None) and not rec["stationary"] and not allow_missing_motion:
        return None, "moving record without orientation/speed and no flow supplied"
    return Observation(rec["video_id"], rec["track_id"], rec["frame"], Box(x1, y1, x2, y2),
                       rec["category"], None if ori is None else float(ori),
                       None if spd is None else float(spd), rec["stationary"]), None


def read_observations(path, allow_missing_motion=False):
    """Parse a tracklet record file, collecting every problem before failing.

    Raises
    ------
    ValidationError
        Lists each malformed line, unknown category, degenerate box and
        non-increasing frame with its 1-based line number.
    """
    problems, out = [], []
    last_frame = {}
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8").rstrip("\n")
            except UnicodeDecodeError:
                problems.append(f"line {lineno}: not UTF-8")
                continue
            if not line.strip():
                problems.append(f"line {lineno}: blank line")
                continue
            try:
                rec = loads(line)
            except ValueError as exc:
                problems.append(f"line {lineno}: unparseable ({exc})")
                continue
            obs, err = _parse_observation(rec, allow_missing_motion)
            if err:
                problems.append(f"line {lineno}: {err}")
                continue
            if raw != (dumps(_obs_record(obs)) + "\n").encode("utf-8"):
                problems.append(f"line {lineno}: record is not in canonical form")
                continue
            key = (obs.video_id, obs.track_id)
            if key in last_frame and obs.frame <= last_frame[key]:
                problems.append(f"line {lineno}: frame {obs.frame} does not increase for track "
                                f"{obs.track_id} of {obs.video_id}")
                continue
            last_frame[key] = obs.frame
            out.append(obs)
    if problems:
        raise ValidationError(problems)
    return out


def read_tracklets(path, t_w=3, flows=None):
    """Records windowed into tracklets of ``t_w`` frames (short remainders kept)."""
    obs = read_observations(path, allow_missing_motion=flows is not None)
    return normalcy.build_tracklets(obs, t_w, flows)


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

_ANN_KEYS = ("video_id", "frame", "box", "track_id")


def _ann_line(a):
    return dumps({"video_id": a.video_id, "frame": a.frame, "box": [float(v) for v in a.box],
                  "track_id": a.track_id}) + "\n"


def write_annotations(path, annotations):
    data = "".join(_ann_line(a) for a in annotations).encode("utf-8")
    Path(path).write_bytes(data)
    return data


def read_annotations(path):
    problems, out = [], []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                rec = loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, ValueError) as exc:
                problems.append(f"line {lineno}: unparseable ({exc})")
                continue
            if not isinstance(rec, dict) or tuple(rec) != _ANN_KEYS:
                problems.append(f"line {lineno}: expected keys {list(_ANN_KEYS)}")
                continue
            box = rec["box"]
            if not (isinstance(rec["video_id"], str) and _is_int(rec["frame"]) and rec["frame"] >= 0
                    and _is_int(rec["track_id"]) and isinstance(box, list) and len(box) == 4
                    and all(_is_real(v) for v in box) and box[0] < box[2] and box[1] < box[3]):
                problems.append(f"line {lineno}: invalid annotation")
                continue
            ann = GroundTruthAnnotation(rec["video_id"], rec["frame"],
                                        Box(*(float(v) for v in box)), rec["track_id"])
            if raw != _ann_line(ann).encode("utf-8"):
                problems.append(f"line {lineno}: annotation is not in canonical form")
                continue
            out.append(ann)
    if problems:
        raise ValidationError(problems)
    return out


# ---------------------------------------------------------------------------
# Middlebury flow
# ---------------------------------------------------------------------------

def encode_flo(flow):
    h, w = flow.height, flow.width
    uv = np.empty((h, w, 2), dtype="<f4")
    uv[..., 0] = flow.u
    uv[..., 1] = flow.v
    if not np.all(np.isfinite(uv)):
        raise ValueError("flow does not fit in float32")
    return struct.pack("<fii", FLO_MAGIC, w, h) + uv.tobytes()


def decode_flo(data):
    """Parse Middlebury ``.flo`` bytes into a :class:`FlowField`."""
    if len(data) < 4:
        raise FormatError("truncated .flo magic", len(data))
    (magic,) = struct.unpack_from("<f", data, 0)
    if magic != FLO_MAGIC:
        raise FormatError("bad .flo magic", 0)
    if len(data) < 12:
        raise FormatError("truncated .flo header", len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    if not (0 < w <= FLO_MAX_SIDE):
        raise FormatError(f"implausible .flo width {w}", 4)
    if not (0 < h <= FLO_MAX_SIDE):
        raise FormatError(f"implausible .flo height {h}", 8)
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise FormatError(f"truncated .flo payload (need {expected} bytes)", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after .flo payload", expected)
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    bad = np.nonzero(~np.isfinite(uv.ravel()))[0]
    if bad.size:
        raise FormatError("non-finite flow value", 12 + 4 * int(bad[0]))
    return FlowField(uv[..., 0].astype(np.float64), uv[..., 1].astype(np.float64))


def write_flo(path, flow):
    data = encode_flo(flow)
    Path(path).write_bytes(data)
    return data


def read_flo(path):
    return decode_flo(Path(path).read_bytes())


def flow_path(root, video_id, frame):
    return Path(root) / video_id / f"{frame:06d}.flo"


def write_flow_dir(root, video_id, flows):
    for frame, flow in sorted(flows.items()):
        p = flow_path(root, video_id, frame)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_flo(p, flow)


class FlowDirectory:
    """Lazy ``(video_id, frame) -> FlowField`` view over a flow directory."""

    def __init__(self, root, video_id):
        self.root, self.video_id = Path(root), video_id

    def __getitem__(self, frame):
        p = flow_path(self.root, self.video_id, frame)
        if not p.exists():
            raise KeyError(f"missing flow raster {p}")
        return read_flo(p)


# ---------------------------------------------------------------------------
# region maps
# ---------------------------------------------------------------------------

def encode_pgm(labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label raster must be 2-D")
    if labels.min() < 0 or labels.max() >= MAX_PGM_LABELS:
        raise ValueError("graymap rasters hold labels 0..255 only")
    h, w = labels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes()


def decode_pgm(data):
    """Parse the strict binary graymap layout written by :func:`encode_pgm`."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        end = data.find(b"\n", pos)
        if end < 0 or end - pos > 32:
            raise FormatError("truncated graymap header", pos)
        tokens.extend(data[pos:end].split(b" ") if len(tokens) == 1 else [data[pos:end]])
        pos = end + 1
    if tokens[0] != b"P5":
        raise FormatError("bad graymap magic", 0)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError("non-numeric graymap header", 3) from None
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    if maxval != 255 or w <= 0 or h <= 0 or data[:pos] != header:
        raise FormatError("non-canonical graymap header", 0)
    if len(data) < pos + w * h:
        raise FormatError("truncated graymap raster", len(data))
    if len(data) > pos + w * h:
        raise FormatError("trailing bytes after graymap raster", pos + w * h)
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w).astype(np.int64)


def write_region_map(path, region_map):
    """Write ``<path>`` (graymap) and ``<path>.json`` (sidecar with K and provenance)."""
    if region_map.K > MAX_PGM_LABELS:
        raise ValueError("region maps with more than 256 labels cannot be stored as graymaps")
    raster = encode_pgm(region_map.labels)
    Path(path).write_bytes(raster)
    write_document(_sidecar(path), "region-map", {
        "K": region_map.K, "height": region_map.height, "width": region_map.width,
        "raster_sha256": hashlib.sha256(raster).hexdigest(),
        "content_hash": region_map.content_hash(),
        "provenance": gmm._plain(region_map.provenance),
        "attribute_layout": DEFAULT_LAYOUT.to_dict(),
        "palette": [list(c) for c in default_palette(region_map.K)],
    })
    return raster


def _sidecar(path):
    return Path(str(path) + ".json")


def read_region_map(path):
    raster = Path(path).read_bytes()
    side = read_document(_sidecar(path), "region-map")
    if hashlib.sha256(raster).hexdigest() != side["raster_sha256"]:
        raise FormatError(f"{path}: raster does not match its sidecar", 0)
    labels = decode_pgm(raster)
    if labels.shape != (side["height"], side["width"]):
        raise FormatError(f"{path}: raster size disagrees with sidecar", 0)
    try:
        rm = RegionMap(labels, int(side["K"]), side["provenance"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}", 0) from None
    if rm.content_hash() != side["content_hash"]:
        raise FormatError(f"{path}: content hash mismatch", 0)
    return rm


# ---------------------------------------------------------------------------
# mixtures and model sets
# ---------------------------------------------------------------------------

def write_gmm(path, model):
    return write_document(path, "gaussian-mixture", {"model": model.to_dict()})


def read_gmm(path):
    doc = read_document(path, "gaussian-mixture")
    try:
        return gmm.GaussianMixture.from_dict(doc["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid mixture: {exc}", 0) from None


def write_model_set(path, model_set):
    return write_document(path, "regional-model-set", {"model_set": model_set.to_dict()})


def read_model_set(path):
    doc = read_document(path, "regional-model-set")
    try:
        return normalcy.RegionalModelSet.from_dict(doc["model_set"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid model set: {exc}", 0) from None


# ---------------------------------------------------------------------------
# scores and metrics
# ---------------------------------------------------------------------------

SCORE_HEADER = "video_id,frame,raw,smoothed"


def _score_row(video_id, frame, raw, smoothed):
    return f"{video_id},{frame},{_fmt_float(float(raw))},{_fmt_float(float(smoothed))}\n"


def write_frame_scores(path, pairs):
    """``pairs`` is a list of ``(raw, smoothed)`` FrameScoreSeries for each video."""
    buf = io.StringIO()
    buf.write(SCORE_HEADER + "\n")
    for raw, smoothed in pairs:
        if raw.video_id != smoothed.video_id or len(raw) != len(smoothed):
            raise ValueError("raw and smoothed series disagree")
        if "," in raw.video_id or "\n" in raw.video_id:
            raise ValueError("video ids in score tables cannot contain commas or newlines")
        for f, (a, b) in enumerate(zip(raw.scores, smoothed.scores)):
            buf.write(_score_row(raw.video_id, f, a, b))
    data = buf.getvalue().encode("utf-8")
    Path(path).write_bytes(data)
    return data


def read_frame_scores(path):
    """Return ``{video_id: (raw array, smoothed array)}`` in file order."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8", exc.start) from None
    lines = text.split("\n")
    if lines[0] != SCORE_HEADER:
        raise FormatError(f"{path}: bad score table header", 0)
    if lines[-1] != "":
        raise FormatError(f"{path}: missing final newline", len(text.encode("utf-8")))
    rows, current = {}, None
    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split(",")
        try:
            vid, frame, raw, sm = parts[0], int(parts[1]), float(parts[2]), float(parts[3])
            if len(parts) != 4 or line + "\n" != _score_row(vid, frame, raw, sm):
                raise ValueError
        except (ValueError, IndexError):
            raise ValidationError([f"line {lineno}: malformed score row"]) from None
        if vid != current and vid in rows:
            raise ValidationError([f"line {lineno}: rows of {vid} are not contiguous"])
        current = vid
        seq = rows.setdefault(vid, [])
        if frame != len(seq):
            raise ValidationError([f"line {lineno}: frames of {vid} are not consecutive"])
        seq.append((raw, sm))
    out = {}
    for vid, seq in rows.items():
        arr = np.array(seq, dtype=np.float64).reshape(-1, 2)
        out[vid] = (arr[:, 0], arr[:, 1])
    return out


def _score_line(s):
    return dumps({"video_id": s.video_id, "track_id": s.track_id, "start_frame": s.start_frame,
                  "stop_frame": s.stop_frame, "region": s.region, "nll": float(s.nll),
                  "boxes": [[float(v) for v in b] for b in s.boxes]}) + "\n"


def write_tracklet_scores(path, scores):
    data = "".join(_score_line(s) for s in scores).encode("utf-8")
    Path(path).write_bytes(data)
    return data


def read_tracklet_scores(path):
    out, problems = [], []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                r = loads(raw.decode("utf-8"))
                s = TrackletScore(r["video_id"], int(r["track_id"]), int(r["start_frame"]),
                                  int(r["stop_frame"]), int(r["region"]), float(r["nll"]),
                                  tuple(Box(*(float(v) for v in b)) for b in r["boxes"]))
                if len(s.boxes) != s.stop_frame - s.start_frame:
                    raise ValueError("box count does not match the window")
                if raw != _score_line(s).encode("utf-8"):
                    raise ValueError("record is not in canonical form")
            except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            out.append(s)
    if problems:
        raise ValidationError(problems)
    return out


def write_metrics(path, report):
    return write_document(path, "metrics-report", {"report": report})


def read_metrics(path):
    return read_document(path, "metrics-report")["report"]


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat run settings; every field is also a ``--flag`` on the command line."""

    seed: int = 0
    t_w: int = 3
    kernel_sigma: str = "adaptive"
    K: int = 4
    k_candidates: str = "2,3,4,6,8"
    k_max: int = 20
    min_samples: int = 50
    method: str = "gmm-full"
    spatial_affinity: float = 0.0
    subsample: int = 200_000
    smoothing_sigma: float = 7.0
    empty_floor: float = 0.0
    iou_threshold: float = 0.1
    track_fraction: float = 0.1
    encoding: str = "radians"
    layout: str = "four-zone"
    height: int = 0  # 0 = infer from the records
    width: int = 0
    n_frames: int = 2000
    anomaly_rate: float = 0.0
    anomaly_kinds: str = "wrong-category,wrong-direction,overspeed,cross-zone-path"
    n_train: int = 10_000
    n_test: int = 20_000

    def __post_init__(self):
        problems = []
        for name in ("t_w", "K", "k_max", "min_samples", "subsample", "n_frames"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.height < 0 or self.width < 0:
            problems.append("height and width must be >= 0")
        for name in ("smoothing_sigma", "spatial_affinity", "iou_threshold", "track_fraction",
                     "anomaly_rate"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                problems.append(f"{name} must be a finite value >= 0")
        if self.kernel_sigma != "adaptive":
            try:
                if not float(self.kernel_sigma) > 0:
                    raise ValueError
            except ValueError:
                problems.append("kernel_sigma must be 'adaptive' or a positive number")
        try:
            if any(k < 1 for k in self.candidates()):
                raise ValueError
        except ValueError:
            problems.append("k_candidates must be a comma-separated list of counts >= 1")
        if problems:
            raise ValidationError(problems)

    def candidates(self):
        return [int(k) for k in self.k_candidates.split(",") if k.strip()]

    def sigma(self):
        return None if self.kernel_sigma == "adaptive" else float(self.kernel_sigma)

    @classmethod
    def field_types(cls):
        return {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values):
        types = cls.field_types()
        kwargs, problems = {}, []
        for k, v in values.items():
            if k not in types:
                problems.append(f"unknown config key {k!r}")
                continue
            try:
                kwargs[k] = types[k](v)
            except ValueError:
                problems.append(f"{k}: cannot parse {v!r} as {types[k].__name__}")
        if problems:
            raise ValidationError(problems)
        return cls(**kwargs)

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={_fmt_float(v) if isinstance(v, float) else v}")
        return "\n".join(out) + "\n"


def parse_config_text(text):
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    values, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key=value")
            continue
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    if problems:
        raise ValidationError(problems)
    return values


def read_config(path):
    return RunConfig.from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")))


def write_config(path, config):
    data = config.to_text().encode("utf-8")
    Path(path).write_bytes(data)
    return data


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
