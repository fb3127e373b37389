"""Broadcast cost matrix between every ground truth and every prediction."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from . import geometry
from .numkernel import ShapeError, as_matrix, softmax_rows

PROB_CLAMP = 1e-8
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class ClsMode(str, enum.Enum):
    NLL = "nll"
    FOCAL = "focal"


@dataclass
class GroundTruthSet:
    labels: np.ndarray  # (M,) int
    boxes: np.ndarray  # (M, 4) cx, cy, w, h

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.labels) != len(self.boxes):
            raise ValueError(f"{len(self.labels)} labels but {len(self.boxes)} boxes")
        if np.any(self.labels < 0):
            raise ValueError("class ids must be non-negative")
        geometry.check_boxes(self.boxes)

    def __len__(self) -> int:
        return len(self.labels)

    def permuted(self, order) -> "GroundTruthSet":
        order = np.asarray(order)
        return GroundTruthSet(self.labels[order], self.boxes[order])

    @classmethod
    def empty(cls) -> "GroundTruthSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))


@dataclass
class PredictionSet:
    logits: np.ndarray  # (N, K)
    boxes: np.ndarray  # (N, 4)

    def __post_init__(self):
        self.logits = as_matrix(self.logits, "logits")
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.logits.shape[0] != len(self.boxes):
            raise ShapeError(f"{self.logits.shape[0]} logit rows but {len(self.boxes)} boxes")
        if self.logits.shape[1] < 1:
            raise ShapeError("need at least one class")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")
        geometry.check_boxes(self.boxes)

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def permuted(self, order) -> "PredictionSet":
        order = np.asarray(order)
        return PredictionSet(self.logits[order], self.boxes[order])


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.iou) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass
class CostMatrix:
    values: np.ndarray  # (M, N)
    cls: np.ndarray | None = None
    l1: np.ndarray | None = None
    giou: np.ndarray | None = None  # 1 - GIoU

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def digest(self) -> str:
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        return hashlib.sha256(repr(v.shape).encode() + v.tobytes()).hexdigest()


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class id out of range [0, {num_classes})")


def _focal_parts(p: np.ndarray):
    """Focal cost and d(cost)/dp for clamped probabilities ``p``."""
    a, gam = FOCAL_ALPHA, FOCAL_GAMMA
    nlp, nl1p = -np.log(p), -np.log1p(-p)
    pos = a * (1 - p) ** gam * nlp
    neg = (1 - a) * p**gam * nl1p
    dpos = a * (-gam * (1 - p) ** (gam - 1) * nlp - (1 - p) ** gam / p)
    dneg = (1 - a) * (gam * p ** (gam - 1) * nl1p + p**gam / (1 - p))
    return pos - neg, dpos - dneg


def classification_cost(logits_row, class_id: int, mode: ClsMode | str = ClsMode.NLL) -> float:
    z = np.asarray(logits_row, dtype=np.float64).reshape(1, -1)
    if not 0 <= class_id < z.shape[1]:
        raise ValueError(f"class id {class_id} out of range [0, {z.shape[1]})")
    mode = ClsMode(mode)
    if mode is ClsMode.NLL:
        p = softmax_rows(z)[0, class_id]
        return float(-np.log(np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)))
    p = 1.0 / (1.0 + np.exp(-z[0, class_id]))
    return float(_focal_parts(np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP))[0])


def classification_cost_matrix(logits: np.ndarray, labels: np.ndarray, mode: ClsMode):
    """M x N class costs plus what the backward pass needs."""
    if mode is ClsMode.NLL:
        probs = softmax_rows(logits)
    else:
        probs = 1.0 / (1.0 + np.exp(-logits))
    p = probs[:, labels].T  # (M, N)
    live = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    if mode is ClsMode.NLL:
        return -np.log(pc), (probs, live, None)
    cost, dcost_dp = _focal_parts(pc)
    return cost, (probs, live, dcost_dp)


def broadcast_cost(
    gts: GroundTruthSet,
    preds: PredictionSet,
    w: CostWeights = CostWeights(),
    mode: ClsMode | str = ClsMode.NLL,
    keep_components: bool = True,
) -> CostMatrix:
    mode = ClsMode(mode)
    n = len(preds)
    if n < 1:
        raise ShapeError("need at least one prediction")
    _check_labels(gts.labels, preds.num_classes)
    if len(gts) == 0:
        z = np.zeros((0, n))
        return CostMatrix(z, z.copy(), z.copy(), z.copy()) if keep_components else CostMatrix(z)
    cls, _ = classification_cost_matrix(preds.logits, gts.labels, mode)
    l1 = geometry.pairwise_l1(gts.boxes, preds.boxes)
    giou_term = 1.0 - geometry.pairwise_giou(gts.boxes, preds.boxes)[0]
    values = w.cls * cls + w.l1 * l1 + w.iou * giou_term
    if keep_components:
        return CostMatrix(values, cls, l1, giou_term)
    return CostMatrix(values)


def broadcast_cost_backward(
    gts: GroundTruthSet,
    preds: PredictionSet,
    w: CostWeights,
    dC,
    mode: ClsMode | str = ClsMode.NLL,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(dC * C) w.r.t. prediction logits (N x K) and boxes (N x 4)."""
    mode = ClsMode(mode)
    m, n, k = len(gts), len(preds), preds.num_classes
    dC = np.asarray(dC, dtype=np.float64) if m else np.zeros((0, n))
    if dC.shape != (m, n):
        raise ShapeError(f"dC shape {dC.shape} != ({m}, {n})")
    dlogits = np.zeros((n, k))
    dboxes = np.zeros((n, 4))
    if m == 0:
        return dlogits, dboxes
    _check_labels(gts.labels, k)
    onehot = np.eye(k)[gts.labels]  # (M, K)

    _, (probs, live, dcost_dp) = classification_cost_matrix(preds.logits, gts.labels, mode)
    s = w.cls * dC * live
    if mode is ClsMode.NLL:
        # d(-log softmax_c)/dz = softmax - onehot(c)
        dlogits += s.sum(axis=0)[:, None] * probs - s.T @ onehot
    else:
        p = probs[:, gts.labels].T
        dlogits += (s * dcost_dp * p * (1 - p)).T @ onehot

    dl1 = geometry.pairwise_l1_grad(gts.boxes, preds.boxes)
    _, dgiou = geometry.pairwise_giou(gts.boxes, preds.boxes, with_grad=True)
    dboxes += w.l1 * np.einsum("mn,mnc->nc", dC, dl1)
    dboxes -= w.iou * np.einsum("mn,mnc->nc", dC, dgiou)
    return dlogits, dboxes
