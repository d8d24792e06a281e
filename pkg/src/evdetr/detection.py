"""Set prediction: query heads, bipartite matching, and the detection loss.

Boxes are center-form (cx, cy, w, h) normalized to [0, 1] everywhere
inside the model; export converts to pixel upper-left form. Classification
follows the sigmoid + focal-loss convention (alpha 0.25, gamma 2): "no
object" is the all-background target rather than an explicit extra class.
The matching cost and the loss share one weighting, 2 * classification +
5 * box L1 + 2 * (1 - GIoU).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .events import SensorGeometry
from .tensor import (
    ParamStore,
    RngStream,
    Tensor,
    _sigmoid_np,
    absolute,
    concat,
    linear,
    log_sigmoid,
    maximum,
    minimum,
    sigmoid,
    tsum,
    uniform_init,
)

CLS_WEIGHT, L1_WEIGHT, GIOU_WEIGHT = 2.0, 5.0, 2.0
FOCAL_ALPHA, FOCAL_GAMMA = 0.25, 2.0


@dataclass(frozen=True)
class DecoderConfig:
    n_queries: int = 300
    classes: int = 3
    confidence_threshold: float = 0.5


@dataclass(frozen=True)
class Detection:
    """One predicted box at one query timestamp, normalized center form."""

    cx: float
    cy: float
    w: float
    h: float
    cls: int
    confidence: float
    t_us: int

    def to_pixels(self, geometry: SensorGeometry) -> tuple[float, float, float, float]:
        """Upper-left (x, y, w, h) in pixels."""
        return (
            (self.cx - self.w / 2) * geometry.width,
            (self.cy - self.h / 2) * geometry.height,
            self.w * geometry.width,
            self.h * geometry.height,
        )

    @classmethod
    def from_pixels(cls, x, y, w, h, cls_id, confidence, t_us, geometry: SensorGeometry) -> "Detection":
        return cls(
            (x + w / 2) / geometry.width,
            (y + h / 2) / geometry.height,
            w / geometry.width,
            h / geometry.height,
            cls_id,
            confidence,
            t_us,
        )


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (query index, ground-truth index)
    unmatched: frozenset[int]


@dataclass
class LossBreakdown:
    cls: float
    l1: float
    giou: float
    total: Tensor

    @property
    def total_value(self) -> float:
        return float(self.total.data)


class PredictionHeads:
    """Class and box heads on decoder embeddings.

    Box logits are offsets added to the query's pre-squash reference point
    for (cx, cy) and squashed directly for (w, h), so zeroed heads emit
    boxes sitting exactly on their reference points with w = h = 0.5.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, classes: int, rng: RngStream, prior: float = 0.02):
        self.classes = classes
        self.w_cls = store.new(f"{prefix}.cls.weight", uniform_init(rng, d, (d, classes)))
        self.b_cls = store.new(f"{prefix}.cls.bias", np.full(classes, -math.log((1.0 - prior) / prior)))
        self.w_box = store.new(f"{prefix}.box.weight", np.zeros((d, 4)))
        self.b_box = store.new(f"{prefix}.box.bias", np.zeros(4))

    def __call__(self, embeddings: Tensor, ref_logits: Tensor) -> tuple[Tensor, Tensor]:
        """-> (class logits [Nq, C], boxes cxcywh in (0,1) [Nq, 4])."""
        logits = linear(embeddings, self.w_cls, self.b_cls)
        raw = linear(embeddings, self.w_box, self.b_box)
        boxes = sigmoid(concat([raw[:, :2] + ref_logits, raw[:, 2:]], axis=1))
        return logits, boxes


def detections_from_outputs(logits: np.ndarray, boxes: np.ndarray, t_us: int) -> list[Detection]:
    """All N_q raw detections: class = argmax, confidence = max class prob."""
    probs = _sigmoid_np(logits)
    cls = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    return [
        Detection(float(b[0]), float(b[1]), float(b[2]), float(b[3]), int(c), float(p), t_us)
        for b, c, p in zip(boxes, cls, conf)
    ]


# ---------------------------------------------------------------------------
# GIoU


def _corners(box) -> tuple[float, float, float, float]:
    x, y, w, h = box
    return x, y, x + w, y + h


def giou(a, b) -> float:
    """Generalized IoU of two (x, y, w, h) boxes; in (-1, 1].

    Degenerate zero-area pairs take IoU := 0 but keep the enclosure
    penalty, per the limit convention.
    """
    if a[2] < 0 or a[3] < 0 or b[2] < 0 or b[3] < 0:
        raise ValidationError("giou: negative box dimensions")
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    inter_w = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    inter_h = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = inter_w * inter_h
    union = a[2] * a[3] + b[2] * b[3] - inter
    iou = inter / union if union > 0 else 0.0
    enc_w = max(ax1, bx1) - min(ax0, bx0)
    enc_h = max(ay1, by1) - min(ay0, by0)
    enclosure = enc_w * enc_h
    if enclosure <= 0:
        return 1.0 if iou == 1.0 else 0.0
    return iou - (enclosure - union) / enclosure


def _cxcywh_to_xyxy_np(boxes: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2
    return out


def giou_matrix(pred_cxcywh: np.ndarray, gt_cxcywh: np.ndarray) -> np.ndarray:
    """Pairwise GIoU [n_pred, n_gt] on center-form boxes (plain numpy)."""
    p = _cxcywh_to_xyxy_np(pred_cxcywh)[:, None, :]
    g = _cxcywh_to_xyxy_np(gt_cxcywh)[None, :, :]
    ix0 = np.maximum(p[..., 0], g[..., 0])
    iy0 = np.maximum(p[..., 1], g[..., 1])
    ix1 = np.minimum(p[..., 2], g[..., 2])
    iy1 = np.minimum(p[..., 3], g[..., 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    union = area_p + area_g - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    ex0 = np.minimum(p[..., 0], g[..., 0])
    ey0 = np.minimum(p[..., 1], g[..., 1])
    ex1 = np.maximum(p[..., 2], g[..., 2])
    ey1 = np.maximum(p[..., 3], g[..., 3])
    enclosure = (ex1 - ex0) * (ey1 - ey0)
    return iou - np.where(enclosure > 0, (enclosure - union) / np.maximum(enclosure, 1e-12), 0.0)


def giou_elementwise(pred: Tensor, gt: Tensor) -> Tensor:
    """Differentiable GIoU for matched pairs; both [k, 4] center form."""
    px0 = pred[:, 0] - pred[:, 2] * 0.5
    py0 = pred[:, 1] - pred[:, 3] * 0.5
    px1 = pred[:, 0] + pred[:, 2] * 0.5
    py1 = pred[:, 1] + pred[:, 3] * 0.5
    gx0 = gt[:, 0] - gt[:, 2] * 0.5
    gy0 = gt[:, 1] - gt[:, 3] * 0.5
    gx1 = gt[:, 0] + gt[:, 2] * 0.5
    gy1 = gt[:, 1] + gt[:, 3] * 0.5
    zero = Tensor(np.zeros(pred.shape[0]))
    iw = maximum(minimum(px1, gx1) - maximum(px0, gx0), zero)
    ih = maximum(minimum(py1, gy1) - maximum(py0, gy0), zero)
    inter = iw * ih
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    iou = inter / (union + 1e-12)
    ew = maximum(px1, gx1) - minimum(px0, gx0)
    eh = maximum(py1, gy1) - minimum(py0, gy0)
    enclosure = ew * eh
    return iou - (enclosure - union) / (enclosure + 1e-12)


# ---------------------------------------------------------------------------
# matching


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment on an [n_q, n_gt] matrix; |pairs| = min(n_q, n_gt)."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValidationError("hungarian: cost matrix must be finite")
    if cost.size == 0:
        return MatchResult((), frozenset(range(cost.shape[0])))
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    pairs = tuple((int(rows[i]), int(cols[i])) for i in order)
    unmatched = frozenset(range(cost.shape[0])) - {q for q, _ in pairs}
    return MatchResult(pairs, unmatched)


def _focal_cost(probs: np.ndarray, gt_cls: np.ndarray) -> np.ndarray:
    """Focal-style classification cost on the gt class probability [n_q, n_gt]."""
    p = probs[:, gt_cls]  # [n_q, n_gt]
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * (-np.log(np.maximum(p, 1e-12)))
    neg = (1.0 - FOCAL_ALPHA) * p**FOCAL_GAMMA * (-np.log(np.maximum(1.0 - p, 1e-12)))
    return pos - neg


def match(logits: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, gt_cls: np.ndarray) -> MatchResult:
    """Hungarian assignment under the 2/5/2 matching cost; empty gt allowed."""
    n_q = logits.shape[0]
    if len(gt_boxes) == 0:
        return MatchResult((), frozenset(range(n_q)))
    probs = _sigmoid_np(logits)
    cost_cls = _focal_cost(probs, gt_cls)
    cost_l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    cost_giou = 1.0 - giou_matrix(boxes, gt_boxes)
    return hungarian(CLS_WEIGHT * cost_cls + L1_WEIGHT * cost_l1 + GIOU_WEIGHT * cost_giou)


# ---------------------------------------------------------------------------
# loss


def focal_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element focal binary cross-entropy, summed."""
    t = Tensor(targets)
    p = sigmoid(logits)
    log_p = log_sigmoid(logits)
    log_not_p = log_sigmoid(-logits)
    pos = (-log_p) * (1.0 - p) ** FOCAL_GAMMA * FOCAL_ALPHA
    neg = (-log_not_p) * p**FOCAL_GAMMA * (1.0 - FOCAL_ALPHA)
    return tsum(t * pos + (1.0 - t) * neg)


def detection_loss(
    logits: Tensor,
    boxes: Tensor,
    gt_boxes: np.ndarray,
    gt_cls: np.ndarray,
    matches: MatchResult,
    classes: int,
) -> LossBreakdown:
    """2 * focal classification + 5 * box L1 + 2 * (1 - GIoU), gt-averaged.

    Unmatched queries are supervised toward the all-background target; the
    averaging denominator is the ground-truth count clamped to >= 1.
    """
    n_q = logits.shape[0]
    denom = max(1.0, float(len(gt_boxes)))
    targets = np.zeros((n_q, classes))
    for q, g in matches.pairs:
        targets[q, int(gt_cls[g])] = 1.0
    cls_term = focal_bce(logits, targets) * (1.0 / denom)
    if matches.pairs:
        q_idx = np.array([q for q, _ in matches.pairs])
        g_idx = np.array([g for _, g in matches.pairs])
        matched = boxes[q_idx, :]
        gt = Tensor(gt_boxes[g_idx])
        l1_term = tsum(absolute(matched - gt)) * (1.0 / denom)
        giou_term = tsum(1.0 - giou_elementwise(matched, gt)) * (1.0 / denom)
    else:
        l1_term = Tensor(0.0)
        giou_term = Tensor(0.0)
    total = cls_term * CLS_WEIGHT + l1_term * L1_WEIGHT + giou_term * GIOU_WEIGHT
    return LossBreakdown(float(cls_term.data), float(l1_term.data), float(giou_term.data), total)
