"""Detection-quality evaluation of a placement in AP@{0.3, 0.5, 0.7} form.

A deterministic proxy detector replaces a trained network: every vehicle
with at least one LiDAR return is reported with confidence 1 - exp(-n/n0)
and its ground-truth box shifted in BEV by sigma0 / sqrt(n) in a direction
fixed by a hash of (scenario seed, frame, vehicle). More returns therefore
mean higher confidence and tighter boxes.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError
from .geometry import clip_convex, polygon_area
from .lidar import SweepCache
from .perception import CONFIDENCE_SCALE, fused_cloud, point_confidence

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
NMS_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    box: object
    confidence: float
    source_vehicle: int = -1

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ParameterError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class ProxyConfig:
    n0: float = CONFIDENCE_SCALE
    sigma0: float = 1.0


@dataclass
class APResult:
    ap_03: float
    ap_05: float
    ap_07: float
    counts: dict = field(default_factory=dict)
    per_frame: dict = field(default_factory=dict)

    def as_dict(self):
        return {"ap_03": self.ap_03, "ap_05": self.ap_05, "ap_07": self.ap_07,
                "counts": {str(k): list(v) for k, v in self.counts.items()}}


def bev_iou(a, b):
    """Intersection over union of two boxes' BEV rectangles (z ignored)."""
    pa, pb = a.corners_bev(), b.corners_bev()
    area_a = 4.0 * a.half_extents.x * a.half_extents.y
    area_b = 4.0 * b.half_extents.x * b.half_extents.y
    inter = polygon_area(clip_convex(pa, pb))
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def _offset_direction(seed, frame_index, vehicle_id):
    digest = hashlib.blake2b(f"{seed}:{frame_index}:{vehicle_id}".encode(), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2**64
    return 2.0 * math.pi * u


def detections_from_counts(frame, counts, scenario_seed=0, cfg=None):
    cfg = cfg or ProxyConfig()
    out = []
    for veh in frame.vehicles:
        n = counts.get(veh.vehicle_id, 0)
        if n < 1:
            continue
        angle = _offset_direction(scenario_seed, frame.index, veh.vehicle_id)
        mag = cfg.sigma0 / math.sqrt(n)
        box = veh.box.translated(mag * math.cos(angle), mag * math.sin(angle))
        out.append(Detection(box, point_confidence(n, cfg.n0), veh.vehicle_id))
    return out


def proxy_detect(fused, frame, cfg=None, scenario_seed=0):
    """Proxy detections for one frame from the vehicle labels of a fused cloud."""
    return detections_from_counts(frame, fused.vehicle_counts(), scenario_seed, cfg)


def nms(detections, iou_threshold=NMS_IOU):
    """Greedy non-maximum suppression, highest confidence first (stable on ties)."""
    order = sorted(range(len(detections)), key=lambda k: -detections[k].confidence)
    kept = []
    for k in order:
        d = detections[k]
        if all(bev_iou(d.box, e.box) < iou_threshold for e in kept):
            kept.append(d)
    return kept


def match_detections(detections, ground_truths, iou_threshold):
    """Confidence-ranked greedy matching.

    ``detections`` and ``ground_truths`` are per-frame lists (same length).
    Each detection, in descending confidence order across all frames, takes
    the unmatched ground truth of its frame with the highest IoU at or above
    the threshold. Returns ``(ranked, n_gt)`` where ``ranked`` is a list of
    ``(confidence, is_tp, frame_position)``.
    """
    if len(detections) != len(ground_truths):
        raise ParameterError("detections and ground truths must cover the same frames")
    flat = [(f, k, d) for f, dets in enumerate(detections) for k, d in enumerate(dets)]
    flat.sort(key=lambda item: (-item[2].confidence, item[0], item[1]))
    taken = [set() for _ in ground_truths]
    ranked = []
    for f, _, det in flat:
        best, best_iou = None, -1.0
        for g, gt in enumerate(ground_truths[f]):
            if g in taken[f]:
                continue
            iou = bev_iou(det.box, gt)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = g, iou
        if best is not None:
            taken[f].add(best)
        ranked.append((det.confidence, best is not None, f))
    return ranked, sum(len(g) for g in ground_truths)


def average_precision(tp_flags, n_gt):
    """All-point interpolated AP: area under the precision envelope over recall."""
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def compute_ap(detections, ground_truths, iou_threshold):
    ranked, n_gt = match_detections(detections, ground_truths, iou_threshold)
    return average_precision([tp for _, tp, _ in ranked], n_gt)


def _counts(ranked, ground_truths):
    n_gt = sum(len(g) for g in ground_truths)
    tp = sum(1 for _, ok, _ in ranked if ok)
    return (tp, len(ranked) - tp, n_gt - tp)


def frame_detections(cache, frame_index, placement, mode="early", cfg=None):
    scenario = cache.scenario
    frame = scenario.frame(frame_index)
    if mode == "early":
        cloud, _ = fused_cloud(cache, frame_index, placement)
        return proxy_detect(cloud, frame, cfg, scenario.seed)
    if mode == "late":
        dets = []
        for mid in placement:
            dets.extend(proxy_detect(cache.sweep(frame_index, mid), frame, cfg, scenario.seed))
        return nms(dets)
    raise ParameterError(f"unknown fusion mode {mode!r}")


def evaluate_placement(scenario, placement, frames, spec=None, mode="early", cache=None, cfg=None):
    """AP of the proxy detector at IoU 0.3 / 0.5 / 0.7 over ``frames``."""
    placement = [int(p) for p in placement]
    if not placement:
        raise ParameterError("placement must contain at least one mount")
    frames = sorted(int(f) for f in frames)
    if not frames:
        raise ParameterError("at least one frame is required")
    cache = cache or SweepCache(scenario, spec)
    dets = [frame_detections(cache, f, placement, mode, cfg) for f in frames]
    gts = [[v.box for v in scenario.frame(f).vehicles] for f in frames]
    aps, counts, per_frame = [], {}, {f: {} for f in frames}
    for thr in IOU_THRESHOLDS:
        ranked, n_gt = match_detections(dets, gts, thr)
        aps.append(average_precision([tp for _, tp, _ in ranked], n_gt))
        counts[thr] = _counts(ranked, gts)
        for pos, f in enumerate(frames):
            mine = [r for r in ranked if r[2] == pos]
            per_frame[f][thr] = _counts(mine, [gts[pos]])
    return APResult(aps[0], aps[1], aps[2], counts, per_frame)
