"""Frame-level micro-AUC and region/track-based detection criteria."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from regionvad.errors import UndefinedMetricError
from regionvad.records import Box


class GroundTruthAnnotation(NamedTuple):
    video_id: str
    frame: int
    box: Box
    track_id: int


class Prediction(NamedTuple):
    video_id: str
    frame: int
    box: Box
    score: float


def iou(a, b):
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes; 0 if either is degenerate."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def frame_auc(scores, labels):
    """Mann-Whitney AUC with average ranks for ties.

    Raises
    ------
    UndefinedMetricError
        If only one label value is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("frame AUC needs both normal and anomalous frames")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class DetectionCurve:
    """Area under a detection-rate vs false-positive-rate curve."""

    area: float
    fpr: np.ndarray
    detection_rate: np.ndarray
    thresholds: np.ndarray = field(default_factory=lambda: np.empty(0))

    def points(self):
        return [(float(f), float(d)) for f, d in zip(self.fpr, self.detection_rate)]


def _match(predictions, ground_truth, iou_threshold):
    """Best matching score per GT region and the false-positive flag per prediction."""
    gt_by_frame = defaultdict(list)
    for i, g in enumerate(ground_truth):
        gt_by_frame[(g.video_id, g.frame)].append(i)
    det = np.full(len(ground_truth), -np.inf)
    fp = np.ones(len(predictions), dtype=bool)
    for j, p in enumerate(predictions):
        if not math.isfinite(p.score):
            raise ValueError("prediction scores must be finite")
        for i in gt_by_frame.get((p.video_id, p.frame), ()):
            if iou(p.box, ground_truth[i].box) >= iou_threshold:
                fp[j] = False
                if p.score > det[i]:
                    det[i] = p.score
    return det, fp


def _curve(target_thresholds, n_targets, fp_scores, n_frames, pred_scores, extend):
    """Sweep descending distinct scores plus +inf and integrate over FPR in [0, 1].

    ``target_thresholds`` holds, per detectable unit, the highest threshold at
    which it counts as detected.
    """
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    thresholds = np.concatenate([[np.inf], np.unique(pred_scores)[::-1]])
    tgt = np.sort(target_thresholds)
    fps = np.sort(fp_scores)
    # count of entries >= t for each threshold t
    n_det = tgt.size - np.searchsorted(tgt, thresholds, side="left")
    n_fp = fps.size - np.searchsorted(fps, thresholds, side="left")
    dr = n_det / n_targets
    fpr = n_fp / n_frames
    fpr, dr, thresholds = _clip(fpr, dr, thresholds, extend)
    area = math.fsum((fpr[1:] - fpr[:-1]) * (dr[1:] + dr[:-1]) / 2.0)
    return DetectionCurve(area, fpr, dr, thresholds)


def _clip(fpr, dr, thresholds, extend):
    over = np.nonzero(fpr > 1.0)[0]
    if over.size:
        i = over[0]  # i >= 1 since the +inf point has FPR 0
        f0, f1, d0, d1 = fpr[i - 1], fpr[i], dr[i - 1], dr[i]
        d_at_1 = d0 + (d1 - d0) * (1.0 - f0) / (f1 - f0)
        fpr = np.append(fpr[:i], 1.0)
        dr = np.append(dr[:i], d_at_1)
        thresholds = np.append(thresholds[:i], thresholds[i])
    elif extend == "hold" and fpr[-1] < 1.0:
        fpr = np.append(fpr, 1.0)
        dr = np.append(dr, dr[-1])
        thresholds = np.append(thresholds, -np.inf)
    elif extend not in ("hold", "none"):
        raise ValueError(f"unknown curve extension {extend!r}")
    return fpr, dr, thresholds


def rbdc_curve(predictions, ground_truth, n_frames, iou_threshold=0.1, extend="hold"):
    """Region-based detection curve; see :func:`rbdc`."""
    predictions, ground_truth = list(predictions), list(ground_truth)
    if not ground_truth:
        raise UndefinedMetricError("RBDC needs at least one ground-truth region")
    det, fp = _match(predictions, ground_truth, iou_threshold)
    scores = np.array([p.score for p in predictions], dtype=np.float64)
    return _curve(det, len(ground_truth), scores[fp], n_frames, scores, extend)


def rbdc(predictions, ground_truth, n_frames, iou_threshold=0.1, extend="hold"):
    """Region-based detection criterion.

    A ground-truth region counts as detected at a threshold when a predicted
    box in the same frame with score at or above it overlaps the region with
    IoU >= ``iou_threshold``. The false-positive rate is the number of
    predicted boxes matching no region divided by ``n_frames``, the total
    number of test frames.

    ``extend="hold"`` carries the last detection rate out to FPR 1 when the
    sweep stops short; ``"none"`` leaves the curve where it ends.
    """
    return rbdc_curve(predictions, ground_truth, n_frames, iou_threshold, extend).area


def _track_thresholds(det, ground_truth, track_fraction):
    groups = defaultdict(list)
    for i, g in enumerate(ground_truth):
        groups[(g.video_id, g.track_id)].append(det[i])
    out = []
    for key in sorted(groups, key=str):
        scores = np.sort(np.array(groups[key]))[::-1]
        n = scores.size
        need = next(m for m in range(n + 1) if m / n >= track_fraction) if track_fraction <= 1 else None
        if need is None:
            out.append(-np.inf)
        elif need == 0:
            out.append(np.inf)
        else:
            out.append(scores[need - 1])
    return np.array(out)


def tbdc_curve(predictions, ground_truth, n_frames, iou_threshold=0.1, track_fraction=0.1,
               extend="hold"):
    """Track-based detection curve; see :func:`tbdc`."""
    predictions, ground_truth = list(predictions), list(ground_truth)
    if not ground_truth:
        raise UndefinedMetricError("TBDC needs at least one ground-truth track")
    det, fp = _match(predictions, ground_truth, iou_threshold)
    tracks = _track_thresholds(det, ground_truth, track_fraction)
    scores = np.array([p.score for p in predictions], dtype=np.float64)
    return _curve(tracks, tracks.size, scores[fp], n_frames, scores, extend)


def tbdc(predictions, ground_truth, n_frames, iou_threshold=0.1, track_fraction=0.1,
         extend="hold"):
    """Track-based detection criterion.

    A track counts as detected once the fraction of its regions detected
    (under the RBDC match rule) reaches ``track_fraction``. False positives
    are counted exactly as in :func:`rbdc`.
    """
    return tbdc_curve(predictions, ground_truth, n_frames, iou_threshold, track_fraction,
                      extend).area


def predictions_from_scores(tracklet_scores):
    """One scored box per frame of every scored tracklet window."""
    out = []
    for s in tracklet_scores:
        for k, box in enumerate(s.boxes):
            out.append(Prediction(s.video_id, s.start_frame + k, Box(*box), s.nll))
    return out


def frame_labels(ground_truth, frame_counts):
    """Binary per-frame labels for each video in ``frame_counts`` (video -> frames)."""
    labels = {v: np.zeros(n, dtype=np.int8) for v, n in frame_counts.items()}
    for g in ground_truth:
        if g.video_id in labels and 0 <= g.frame < frame_counts[g.video_id]:
            labels[g.video_id][g.frame] = 1
    return labels
