"""Set-prediction losses: GIoU, sigmoid focal loss, Hungarian matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .autodiff import functional as F
from .autodiff.tensor import Tensor


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = np.moveaxis(b, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(xyxy: np.ndarray) -> np.ndarray:
    return (xyxy[..., 2] - xyxy[..., 0]) * (xyxy[..., 3] - xyxy[..., 1])


def iou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """Pairwise IoU, (n, 4) x (m, 4) corner boxes -> (n, m)."""
    a = np.asarray(a_xyxy, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b_xyxy, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    a = np.asarray(a_xyxy, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b_xyxy, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = np.clip(erb - elt, 0, None)
    enclose = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclose - union) / enclose


def giou(a, b, fmt: str = "cxcywh") -> float:
    """Generalized IoU of two boxes, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if fmt == "cxcywh":
        a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    elif fmt != "xyxy":
        raise ValueError(f"unknown box format {fmt!r}")
    for box in (a, b):
        if not box_area(box) > 0:
            raise ValueError(f"box {box.tolist()} has zero area")
    return float(giou_matrix(a, b)[0, 0])


def giou_tensor(pred_cxcywh: Tensor, target_cxcywh: np.ndarray) -> Tensor:
    """Elementwise GIoU of matched (n, 4) boxes, differentiable in ``pred``."""
    tgt = cxcywh_to_xyxy(target_cxcywh).astype(pred_cxcywh.dtype)
    cx, cy = pred_cxcywh[:, 0], pred_cxcywh[:, 1]
    w, h = pred_cxcywh[:, 2], pred_cxcywh[:, 3]
    x1, y1 = cx - w * 0.5, cy - h * 0.5
    x2, y2 = cx + w * 0.5, cy + h * 0.5
    tx1, ty1, tx2, ty2 = (Tensor(tgt[:, i]) for i in range(4))
    iw = F.relu(F.minimum(x2, tx2) - F.maximum(x1, tx1))
    ih = F.relu(F.minimum(y2, ty2) - F.maximum(y1, ty1))
    inter = iw * ih
    area_p = w * h
    area_t = Tensor(box_area(tgt))
    union = area_p + area_t - inter
    ew = F.maximum(x2, tx2) - F.minimum(x1, tx1)
    eh = F.maximum(y2, ty2) - F.minimum(y1, ty1)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def focal_loss(logits: Tensor, targets, alpha: Optional[float] = 0.25,
               gamma: float = 2.0, reduction: str = "mean") -> Tensor:
    """Sigmoid focal loss  -alpha_t (1 - p_t)^gamma log p_t.

    ``alpha=None`` disables the class balancing factor; with ``gamma=0`` the
    loss then reduces to binary cross-entropy.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {logits.shape}")
    tt = Tensor(t)
    ce = -(F.log_sigmoid(logits) * tt + F.log_sigmoid(-logits) * (1.0 - tt))
    loss = ce
    if gamma:
        p = F.sigmoid(logits)
        p_t = p * tt + (1.0 - p) * (1.0 - tt)
        loss = loss * (1.0 - p_t) ** gamma
    if alpha is not None:
        loss = loss * Tensor(alpha * t + (1 - alpha) * (1 - t))
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0
    use_focal: bool = True
    use_l1: bool = True
    use_giou: bool = True


@dataclass
class DetectionSet:
    """Per-image set prediction: (Q, K) logits and (Q, 4) cx cy w h boxes."""

    class_logits: np.ndarray
    boxes: np.ndarray


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)

    @property
    def query_idx(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_idx(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def match_cost(pred: DetectionSet, gt_boxes: np.ndarray, gt_labels: np.ndarray,
               weights: LossWeights = LossWeights()) -> np.ndarray:
    """(Q, G) matching cost: focal class cost + L1 + (1 - GIoU)."""
    logits = np.asarray(pred.class_logits, dtype=np.float64)
    boxes = np.asarray(pred.boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(gt_labels, dtype=np.int64)
    p = _sigmoid(logits)
    a, g = weights.alpha, weights.gamma
    neg = (1 - a) * p ** g * -np.log(1 - p + 1e-8)
    pos = a * (1 - p) ** g * -np.log(p + 1e-8)
    cost_cls = pos[:, labels] - neg[:, labels]
    cost_l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    cost_giou = 1.0 - giou_matrix(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def hungarian_match(pred: DetectionSet, gt_boxes, gt_labels,
                    weights: LossWeights = LossWeights()) -> MatchResult:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return MatchResult([])
    cost = match_cost(pred, gt_boxes, gt_labels, weights)
    rows, cols = _kernels.linear_sum_assignment(cost)
    return MatchResult(sorted(zip(rows.tolist(), cols.tolist())))


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def total_loss(pred_logits: Tensor, pred_boxes: Tensor, targets: Sequence[dict],
               weights: LossWeights = LossWeights(),
               matches: Optional[Sequence[MatchResult]] = None):
    """Weighted focal + L1 + GIoU loss over a batch.

    ``pred_logits`` is (B, Q, K), ``pred_boxes`` (B, Q, 4) in normalized cx cy
    w h; each target is ``{"boxes": (G, 4), "labels": (G,)}``.  Focal loss is
    summed over queries and classes, and every term is divided by the number
    of ground-truth boxes in the batch (at least 1).  Returns the total, a
    dict of unweighted component values, and the matches used.
    """
    b, q, k = pred_logits.shape
    if matches is None:
        matches = [
            hungarian_match(DetectionSet(pred_logits.data[i], pred_boxes.data[i]),
                            t["boxes"], t["labels"], weights)
            for i, t in enumerate(targets)
        ]
    num_boxes = max(1, sum(len(t["labels"]) for t in targets))
    onehot = np.zeros((b, q, k), dtype=pred_logits.dtype)
    bi, qi, gt_b = [], [], []
    for i, (m, t) in enumerate(zip(matches, targets)):
        if not m.pairs:
            continue
        labels = np.asarray(t["labels"], dtype=np.int64)
        boxes = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 4)
        onehot[i, m.query_idx, labels[m.gt_idx]] = 1.0
        bi.append(np.full(len(m.pairs), i))
        qi.append(m.query_idx)
        gt_b.append(boxes[m.gt_idx])

    zero = Tensor(np.zeros((), dtype=pred_logits.dtype))
    total = zero
    comps = {"focal": 0.0, "l1": 0.0, "giou": 0.0}
    if weights.use_focal:
        lf = focal_loss(pred_logits, onehot, weights.alpha, weights.gamma, "sum") * (1.0 / num_boxes)
        comps["focal"] = float(lf.data)
        total = total + lf * weights.cls
    if bi:
        idx = (np.concatenate(bi), np.concatenate(qi))
        matched = pred_boxes[idx]
        target = np.concatenate(gt_b).astype(pred_boxes.dtype)
        if weights.use_l1:
            l1 = _abs(matched - Tensor(target)).sum() * (1.0 / num_boxes)
            comps["l1"] = float(l1.data)
            total = total + l1 * weights.l1
        if weights.use_giou:
            lg = (1.0 - giou_tensor(matched, target)).sum() * (1.0 / num_boxes)
            comps["giou"] = float(lg.data)
            total = total + lg * weights.giou
    comps["total"] = float(total.data)
    return total, comps, matches


def _abs(x: Tensor) -> Tensor:
    return F.maximum(x, -x)
