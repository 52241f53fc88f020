"""COCO-style precision/recall/AP evaluation for box detections.

Boxes are normalized cx cy w h; pixel areas (for the size bins) use the
image height and width stored with each ground-truth record.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detection import cxcywh_to_xyxy, iou_matrix

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, np.inf),
}
CLASS_NAMES = ("BN", "MN")
TABLE_COLUMNS = ("AP@0.5-BN", "AP@0.5-MN", "AP", "AP@0.5", "AP@0.75", "AP_s", "AP_m", "AP_l")


def greedy_match(ious: np.ndarray, iou_threshold: float,
                 gt_ignore: Optional[np.ndarray] = None):
    """Match detections (rows, already in descending score order) to gts.

    Each detection takes the unmatched gt of highest IoU at or above the
    threshold, preferring non-ignored gts.  Returns (tp, ignored) boolean
    arrays over detections; a detection matched to an ignored gt is ignored.
    """
    n_det, n_gt = ious.shape
    ign = np.zeros(n_gt, bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    taken = np.zeros(n_gt, bool)
    tp = np.zeros(n_det, bool)
    det_ign = np.zeros(n_det, bool)
    # regular gts are tried before ignored ones
    order = np.argsort(ign, kind="stable")
    for d in range(n_det):
        best, best_iou = -1, iou_threshold
        for g in order:
            if taken[g]:
                continue
            if best >= 0 and not ign[best] and ign[g]:
                break
            if ious[d, g] >= best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            det_ign[d] = ign[best]
            tp[d] = not ign[best]
    return tp, det_ign


def _sweep(tp: np.ndarray, n_gt: int) -> List[Tuple[float, float]]:
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt if n_gt else np.zeros(len(tp))
    precision = tps / np.maximum(tps + fps, 1)
    return list(zip(precision.tolist(), recall.tolist()))


def pr_curve(detections: Sequence[Tuple[np.ndarray, np.ndarray]],
             ground_truths: Sequence[np.ndarray], iou_threshold: float = 0.5):
    """Single-class precision/recall sweep.

    ``detections[i]`` is (boxes (n, 4), scores (n,)) for image i and
    ``ground_truths[i]`` the (m, 4) gt boxes.  Returns a list of (precision,
    recall) pairs, one per detection in descending score order.
    """
    flags, scores = [], []
    for (boxes, sc), gt in zip(detections, ground_truths):
        sc = np.asarray(sc, dtype=np.float64)
        order = np.argsort(-sc, kind="stable")
        ious = iou_matrix(cxcywh_to_xyxy(np.asarray(boxes).reshape(-1, 4)[order]),
                          cxcywh_to_xyxy(np.asarray(gt).reshape(-1, 4)))
        tp, _ = greedy_match(ious, iou_threshold)
        flags.append(tp)
        scores.append(sc[order])
    if not flags:
        return []
    tp = np.concatenate(flags)
    order = np.argsort(-np.concatenate(scores), kind="stable")
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in ground_truths)
    return _sweep(tp[order], n_gt)


def average_precision(curve: Sequence[Tuple[float, float]], n_gt: int = 1) -> Optional[float]:
    """101-point interpolated AP; ``None`` when there is no ground truth."""
    if n_gt == 0:
        return None
    if len(curve) == 0:
        return 0.0
    prec = np.array([p for p, _ in curve], dtype=np.float64)
    rec = np.array([r for _, r in curve], dtype=np.float64)
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.searchsorted(rec, RECALL_GRID, side="left")
    vals = np.where(idx < len(rec), envelope[np.minimum(idx, len(rec) - 1)], 0.0)
    return float(vals.mean())


@dataclass
class EvalReport:
    AP: Optional[float]
    AP50: Optional[float]
    AP75: Optional[float]
    AP_s: Optional[float]
    AP_m: Optional[float]
    AP_l: Optional[float]
    AP50_per_class: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
            "AP_s": self.AP_s, "AP_m": self.AP_m, "AP_l": self.AP_l,
            "AP50_per_class": dict(self.AP50_per_class),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def row(self) -> list:
        pc = self.AP50_per_class
        return [pc.get("BN"), pc.get("MN"), self.AP, self.AP50, self.AP75,
                self.AP_s, self.AP_m, self.AP_l]

    def table(self, name: str = "") -> str:
        return format_table([(name, self)])


def format_table(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """Aligned plain-text table, one line per labelled report."""
    name_w = max([len(n) for n, _ in rows] + [4])
    widths = [max(len(c), 6) for c in TABLE_COLUMNS]
    head = " " * name_w + "  " + "  ".join(c.rjust(w) for c, w in zip(TABLE_COLUMNS, widths))
    lines = [head]
    for name, rep in rows:
        cells = ["-" if v is None else f"{v:.3f}" for v in rep.row()]
        lines.append(name.ljust(name_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _image_key(gt: dict, index: int):
    return gt.get("id", index)


def class_ap(detections: Sequence[dict], ground_truths: Sequence[dict], label: int,
             iou_threshold: float, area: Tuple[float, float] = AREA_RANGES["all"]):
    """AP for one class at one IoU threshold and gt area range."""
    lo, hi = area
    flags, ignored, keys = [], [], []
    n_gt = 0
    for i, (det, gt) in enumerate(zip(detections, ground_truths)):
        scale = float(gt["height"]) * float(gt["width"])
        gl = np.asarray(gt["labels"], dtype=np.int64)
        gb = np.asarray(gt["boxes"], dtype=np.float64).reshape(-1, 4)[gl == label]
        g_area = gb[:, 2] * gb[:, 3] * scale
        g_ign = (g_area < lo) | (g_area >= hi)
        n_gt += int((~g_ign).sum())

        dl = np.asarray(det["labels"], dtype=np.int64)
        keep = dl == label
        db = np.asarray(det["boxes"], dtype=np.float64).reshape(-1, 4)[keep]
        ds = np.asarray(det["scores"], dtype=np.float64)[keep]
        didx = np.flatnonzero(keep)
        order = np.argsort(-ds, kind="stable")
        db, ds, didx = db[order], ds[order], didx[order]
        ious = iou_matrix(cxcywh_to_xyxy(db), cxcywh_to_xyxy(gb))
        tp, d_ign = greedy_match(ious, iou_threshold, g_ign)
        # unmatched detections outside the area range do not count
        d_area = db[:, 2] * db[:, 3] * scale
        d_ign |= ~tp & ~d_ign & ((d_area < lo) | (d_area >= hi))
        flags.append(tp)
        ignored.append(d_ign)
        key = _image_key(gt, i)
        keys.extend((-s, key, j) for s, j in zip(ds.tolist(), didx.tolist()))
    if n_gt == 0:
        return None
    if not keys:
        return 0.0
    tp = np.concatenate(flags)
    ign = np.concatenate(ignored)
    order = sorted(range(len(keys)), key=keys.__getitem__)
    tp, ign = tp[order], ign[order]
    return average_precision(_sweep(tp[~ign], n_gt), n_gt)


def evaluate(detections: Sequence[dict], ground_truths: Sequence[dict],
             num_classes: int = 2, class_names: Sequence[str] = CLASS_NAMES) -> EvalReport:
    """Full metric suite.

    ``detections[i]`` holds "boxes", "scores", "labels" for image i;
    ``ground_truths[i]`` holds "boxes", "labels", "height", "width" and
    optionally an "id" used to break score ties independently of image order.
    """
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection records for {len(ground_truths)} images")

    def ap_over(thresholds, area):
        return _mean(class_ap(detections, ground_truths, c, t, area)
                     for t in thresholds for c in range(num_classes))

    per_class = {
        class_names[c] if c < len(class_names) else str(c):
            class_ap(detections, ground_truths, c, 0.5)
        for c in range(num_classes)
    }
    return EvalReport(
        AP=ap_over(IOU_THRESHOLDS, AREA_RANGES["all"]),
        AP50=ap_over([0.5], AREA_RANGES["all"]),
        AP75=ap_over([0.75], AREA_RANGES["all"]),
        AP_s=ap_over(IOU_THRESHOLDS, AREA_RANGES["small"]),
        AP_m=ap_over(IOU_THRESHOLDS, AREA_RANGES["medium"]),
        AP_l=ap_over(IOU_THRESHOLDS, AREA_RANGES["large"]),
        AP50_per_class=per_class,
    )
