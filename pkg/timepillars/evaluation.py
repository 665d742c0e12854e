"""
Decoding head outputs to boxes and scoring them: matching, AP, TP errors, NDS
and distance-binned AP.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import CLASS_INDEX, CLASS_NAMES, UNCLEAR, RotatedBox, nms, wrap_angle
from .pillars import OUTPUT_STRIDE

MIN_DIM = 1e-3
MATCH_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
DEFAULT_BINS = ((0.0, 50.0), (50.0, 100.0), (100.0, None))
INDEX_CLASS = {v: k for k, v in CLASS_INDEX.items()}


@dataclass
class EvalConfig:
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    max_candidates: int | None = None
    match_thresholds: list = field(default_factory=lambda: list(MATCH_THRESHOLDS))
    tp_threshold: float = TP_THRESHOLD
    distance_bins: list = field(default_factory=lambda: [list(b) for b in DEFAULT_BINS])
    normalize_ate: bool = False

    def __post_init__(self):
        if not (0 <= self.score_threshold <= 1 and 0 <= self.nms_iou <= 1):
            raise ValueError("score_threshold and nms_iou must lie in [0, 1]")
        if self.max_candidates is not None and (isinstance(self.max_candidates, bool)
                                                or not isinstance(self.max_candidates, int)
                                                or self.max_candidates < 1):
            raise ValueError(f"max_candidates must be a positive integer or null, got {self.max_candidates!r}")
        if not self.match_thresholds or min(self.match_thresholds) <= 0:
            raise ValueError("match_thresholds must be positive distances")
        for low, high in self.distance_bins:
            if high is not None and high <= low:
                raise ValueError(f"distance bin [{low}, {high}) is empty")


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_detections(head, grid, score_threshold=0.3, nms_iou=0.5, max_candidates=None):
    """
    Turn per-cell head maps into NMS-filtered boxes.

    A cell yields a box when its best non-background probability reaches
    ``score_threshold`` and background is not the overall argmax.

    Args:
        head: HeadOutput on the output grid
        grid: GridSpec of the encoder
        score_threshold: Minimum class probability
        nms_iou: Per-class NMS IoU threshold
        max_candidates: Keep only the highest-scoring cells before NMS

    Returns:
        list of RotatedBox in descending score order
    """
    if not (0 <= score_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("score_threshold and nms_iou must lie in [0, 1]")
    probs = head.cls
    foreground = probs[..., 1:]
    label_index = foreground.argmax(axis=-1) + 1
    scores = foreground.max(axis=-1)
    keep = (scores >= score_threshold) & (probs.argmax(axis=-1) != 0)
    rows, cols = np.nonzero(keep)
    order = np.lexsort((np.arange(len(rows)), -scores[rows, cols]))
    if max_candidates is not None:
        order = order[:max_candidates]

    cell = grid.cell * OUTPUT_STRIDE
    boxes = []
    for n in order:
        i, j = rows[n], cols[n]
        dx, dy, z = (float(v) for v in head.loc[i, j])
        length, width, height = (max(float(v), MIN_DIM) for v in head.size[i, j])
        s, c = (float(v) for v in head.heading[i, j])
        norm = math.hypot(s, c)
        yaw = math.atan2(s / norm, c / norm) if norm > 0 else 0.0
        boxes.append(RotatedBox(
            grid.x_min + (i + 0.5) * cell + dx,
            grid.y_min + (j + 0.5) * cell + dy,
            z, length, width, height, yaw,
            INDEX_CLASS[int(label_index[i, j])],
            min(float(scores[i, j]), 1.0),
        ))
    return nms(boxes, nms_iou)


# ---------------------------------------------------------------------------
# Matching and AP
# ---------------------------------------------------------------------------

class MatchResult(NamedTuple):
    matches: list           # (det index, gt index, distance)
    unmatched_dets: list
    unmatched_gts: list


def _score_order(dets):
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(dets, gts, distance_threshold):
    """
    Greedy one-to-one matching by BEV center distance.

    Detections are taken by descending score; each claims the nearest
    unmatched ground truth of its class within ``distance_threshold``.
    """
    used = set()
    matches = []
    unmatched = []
    for d in _score_order(dets):
        det = dets[d]
        best, best_dist = None, None
        for g, gt in enumerate(gts):
            if g in used or gt.label != det.label:
                continue
            dist = math.hypot(det.cx - gt.cx, det.cy - gt.cy)
            if dist <= distance_threshold and (best is None or dist < best_dist):
                best, best_dist = g, dist
        if best is None:
            unmatched.append(d)
        else:
            used.add(best)
            matches.append((d, best, best_dist))
    return MatchResult(matches, unmatched, [g for g in range(len(gts)) if g not in used])


def _precision_recall_ap(scores, tp_flags, n_gt):
    if n_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall = np.concatenate([[0.0], recall])
    envelope = np.concatenate([[envelope[0]], envelope])
    return float(np.sum(np.diff(recall) * (envelope[1:] + envelope[:-1]) / 2))


def _class_frame_ap(frames, label, threshold):
    scores, flags, n_gt = [], [], 0
    for dets, gts in frames:
        dets_c = [d for d in dets if d.label == label]
        gts_c = [g for g in gts if g.label == label]
        n_gt += len(gts_c)
        result = match_detections(dets_c, gts_c, threshold)
        matched = {d for d, _, _ in result.matches}
        scores += [d.score for d in dets_c]
        flags += [i in matched for i in range(len(dets_c))]
    return _precision_recall_ap(scores, flags, n_gt)


def average_precision(dets, gts, label, thresholds=MATCH_THRESHOLDS, frames=None):
    """
    AP of one class averaged over the distance thresholds.

    Precision is made monotone (upper envelope) and integrated over recall
    with the trapezoid rule from recall 0. Returns None when the class has no
    ground truth. Pass ``frames`` [(dets, gts), ...] to pool several frames.
    """
    frames = frames if frames is not None else [(dets, gts)]
    values = [_class_frame_ap(frames, label, t) for t in thresholds]
    if values[0] is None:
        return None
    return float(np.mean(values))


def _aligned_iou_3d(det, gt):
    inter = min(det.l, gt.l) * min(det.w, gt.w) * min(det.h, gt.h)
    union = det.l * det.w * det.h + gt.l * gt.w * gt.h - inter
    return inter / union


def tp_errors(matches, normalize_ate=False):
    """
    (ATE, ASE, AOE) means over matched (det, gt) box pairs.

    ATE is the BEV center distance (divided by the gt range when
    ``normalize_ate``), ASE is 1 - IoU of the boxes aligned on center and yaw,
    AOE the absolute yaw difference wrapped to [0, pi]. No matches gives 1.0
    for each.
    """
    if not matches:
        return 1.0, 1.0, 1.0
    ate, ase, aoe = [], [], []
    for det, gt in matches:
        dist = math.hypot(det.cx - gt.cx, det.cy - gt.cy)
        ate.append(dist / max(gt.bev_range, 1.0) if normalize_ate else dist)
        ase.append(1.0 - _aligned_iou_3d(det, gt))
        aoe.append(abs(wrap_angle(det.yaw - gt.yaw)))
    return float(np.mean(ate)), float(np.mean(ase)), float(np.mean(aoe))


def nds(m_ap, m_ate, m_ase, m_aoe):
    """Detection score: (5 * mAP + sum(1 - min(1, err))) / 8."""
    return (5.0 * m_ap + sum(1.0 - min(1.0, e) for e in (m_ate, m_ase, m_aoe))) / 8.0


def _bin_label(low, high):
    return f"[{low:g}, {'inf' if high is None else f'{high:g}'})"


def _in_bin(box, low, high):
    r = box.bev_range
    return r >= low and (high is None or r < high)


def distance_binned_eval(dets, gts, bins=DEFAULT_BINS, thresholds=MATCH_THRESHOLDS, frames=None):
    """
    Per-bin, per-class AP with gts and dets binned by their own BEV range.

    Returns:
        {bin label: {class: AP or None}}
    """
    frames = frames if frames is not None else [(dets, gts)]
    table = {}
    for low, high in bins:
        binned = [([d for d in ds if _in_bin(d, low, high)], [g for g in gs if _in_bin(g, low, high)])
                  for ds, gs in frames]
        table[_bin_label(low, high)] = {
            name: average_precision(None, None, name, thresholds, frames=binned) for name in CLASS_NAMES
        }
    return table


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class MetricsReport:
    per_class_ap: dict
    per_class_tp: dict
    m_ap: float
    m_ate: float
    m_ase: float
    m_aoe: float
    nds: float
    bins: dict
    counts: dict

    def to_dict(self):
        return {
            "nds": self.nds,
            "mAP": self.m_ap,
            "mATE": self.m_ate,
            "mASE": self.m_ase,
            "mAOE": self.m_aoe,
            "per_class_ap": self.per_class_ap,
            "per_class_tp": self.per_class_tp,
            "distance_bins": self.bins,
            "counts": self.counts,
        }

    def to_markdown(self, title="Detection metrics"):
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        lines = [f"# {title}", ""]
        lines.append("| NDS | mAP | mATE | mASE | mAOE |")
        lines.append("|---|---|---|---|---|")
        lines.append(f"| {fmt(self.nds)} | {fmt(self.m_ap)} | {fmt(self.m_ate)} | {fmt(self.m_ase)} | {fmt(self.m_aoe)} |")
        lines += ["", "## Per class", "", "| class | AP | ATE | ASE | AOE | gts |", "|---|---|---|---|---|---|"]
        for name in CLASS_NAMES:
            ate, ase, aoe = self.per_class_tp[name]
            lines.append(f"| {name} | {fmt(self.per_class_ap[name])} | {fmt(ate)} | {fmt(ase)} | {fmt(aoe)} "
                         f"| {self.counts['gts'][name]} |")
        lines += ["", "## AP by distance", "", "| range (m) | " + " | ".join(CLASS_NAMES) + " |",
                  "|---|" + "---|" * len(CLASS_NAMES)]
        for label, row in self.bins.items():
            lines.append(f"| {label} | " + " | ".join(fmt(row[c]) for c in CLASS_NAMES) + " |")
        return "\n".join(lines) + "\n"


def evaluate(frames, config=None):
    """
    Score detections against ground truths over many frames.

    Args:
        frames: [(detections, ground_truths), ...] per core frame; "unclear"
            ground truths are ignored
        config: EvalConfig

    Returns:
        MetricsReport
    """
    config = config or EvalConfig()
    if not frames:
        raise ValueError("cannot evaluate an empty set of frames")
    frames = [(list(dets), [g for g in gts if g.label != UNCLEAR]) for dets, gts in frames]

    per_class_ap = {}
    per_class_tp = {}
    for name in CLASS_NAMES:
        per_class_ap[name] = average_precision(None, None, name, config.match_thresholds, frames=frames)
        pairs = []
        for dets, gts in frames:
            dets_c = [d for d in dets if d.label == name]
            gts_c = [g for g in gts if g.label == name]
            result = match_detections(dets_c, gts_c, config.tp_threshold)
            pairs += [(dets_c[d], gts_c[g]) for d, g, _ in result.matches]
        per_class_tp[name] = tp_errors(pairs, config.normalize_ate)

    evaluated = [name for name in CLASS_NAMES if per_class_ap[name] is not None]
    m_ap = _mean_defined([per_class_ap[n] for n in evaluated]) or 0.0
    if evaluated:
        m_ate, m_ase, m_aoe = (float(np.mean([per_class_tp[n][k] for n in evaluated])) for k in range(3))
    else:
        m_ate = m_ase = m_aoe = 1.0
    bins = distance_binned_eval(None, None, [tuple(b) for b in config.distance_bins],
                                config.match_thresholds, frames=frames)
    counts = {
        "frames": len(frames),
        "detections": sum(len(d) for d, _ in frames),
        "gts": {name: sum(1 for _, gts in frames for g in gts if g.label == name) for name in CLASS_NAMES},
    }
    return MetricsReport(per_class_ap, per_class_tp, m_ap, m_ate, m_ase, m_aoe,
                         nds(m_ap, m_ate, m_ase, m_aoe), bins, counts)


# ---------------------------------------------------------------------------
# Detection files
# ---------------------------------------------------------------------------

def write_detections(path, boxes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([box.to_dict() for box in boxes], f, indent=2)
    return path


def read_detections(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"detections file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [RotatedBox.from_dict(d) for d in json.load(f)]
