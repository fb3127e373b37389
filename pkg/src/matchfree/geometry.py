"""Box representations, L1 and GIoU terms with gradients w.r.t. the predicted box.

Boxes are center format ``(cx, cy, w, h)``. Array functions accept ``(..., 4)``
arrays and broadcast like numpy; the scalar helpers wrap them for one pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BoxError(ValueError):
    """Invalid box coordinates (negative extent or non-finite)."""


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        check_boxes(self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def to_corners(self) -> tuple[float, float, float, float]:
        return tuple(float(v) for v in to_corners(self.as_array()))

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(*(float(v) for v in from_corners(np.array([x1, y1, x2, y2]))))


def _arr(b) -> np.ndarray:
    return b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)


def check_boxes(boxes) -> np.ndarray:
    b = _arr(boxes)
    if b.shape[-1:] != (4,):
        raise BoxError(f"boxes must have trailing dimension 4, got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise BoxError("box coordinates must be finite")
    if np.any(b[..., 2:] < 0):
        raise BoxError("box width and height must be non-negative")
    return b


def to_corners(boxes) -> np.ndarray:
    b = check_boxes(boxes)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    wh = c[..., 2:] - c[..., :2]
    if np.any(wh < 0):
        raise BoxError("corner boxes need x1 <= x2 and y1 <= y2")
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2.0, wh], axis=-1)


def l1_cost(b, g) -> float:
    return float(np.abs(check_boxes(b) - check_boxes(g)).sum())


def pairwise_l1(gt_boxes, pred_boxes) -> np.ndarray:
    """M x N matrix of center-format L1 distances."""
    g = check_boxes(gt_boxes).reshape(-1, 4)
    p = check_boxes(pred_boxes).reshape(-1, 4)
    return np.abs(p[None, :, :] - g[:, None, :]).sum(axis=-1)


def pairwise_l1_grad(gt_boxes, pred_boxes) -> np.ndarray:
    """d|p - g|_1 / dp as an M x N x 4 array (subgradient 0 at equality)."""
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    return np.sign(p[None, :, :] - g[:, None, :])


def _giou_terms(p: np.ndarray, g: np.ndarray, with_grad: bool):
    """GIoU of predicted boxes ``p`` against ``g`` (broadcast), optional d/dp.

    Max/min ties pick the branch that does not move with ``p``, so the
    gradient at touching edges is a one-sided subgradient.
    """
    p = check_boxes(p)
    g = check_boxes(g)
    p, g = np.broadcast_arrays(p, g)
    pc, gc = to_corners(p), to_corners(g)
    px1, py1, px2, py2 = np.moveaxis(pc, -1, 0)
    gx1, gy1, gx2, gy2 = np.moveaxis(gc, -1, 0)

    iw_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    area_p = p[..., 2] * p[..., 3]
    area_g = g[..., 2] * g[..., 3]
    union = area_p + area_g - inter
    ew = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    eh = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    encl = ew * eh

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_u = np.where(union > 0, 1.0 / union, 0.0)
        inv_e = np.where(encl > 0, 1.0 / encl, 0.0)
    iou = inter * inv_u
    has_encl = encl > 0
    # both boxes degenerate and coincident (or collinear): defined as 0
    # clip: round-off can push identical boxes an ulp past 1
    giou = np.clip(np.where(has_encl, iou - (encl - union) * inv_e, 0.0), -1.0, 1.0)
    if not with_grad:
        return giou, None

    # d giou = dI (1/U + I/U^2 - 1/E) + dAp (1/E - I/U^2) - dE U/E^2
    c_inter = inv_u + inter * inv_u**2 - inv_e
    c_area = inv_e - inter * inv_u**2
    c_encl = -union * inv_e**2

    ix_on = iw_raw > 0
    iy_on = ih_raw > 0
    diw_dx1 = -((px1 > gx1) & ix_on).astype(float)
    diw_dx2 = ((px2 < gx2) & ix_on).astype(float)
    dih_dy1 = -((py1 > gy1) & iy_on).astype(float)
    dih_dy2 = ((py2 < gy2) & iy_on).astype(float)
    dew_dx1 = -(px1 < gx1).astype(float)
    dew_dx2 = (px2 > gx2).astype(float)
    deh_dy1 = -(py1 < gy1).astype(float)
    deh_dy2 = (py2 > gy2).astype(float)

    # corners -> center: d/dcx = d/dx1 + d/dx2, d/dw = (d/dx2 - d/dx1) / 2
    dI = np.stack(
        [
            ih * (diw_dx1 + diw_dx2),
            iw * (dih_dy1 + dih_dy2),
            ih * (diw_dx2 - diw_dx1) / 2.0,
            iw * (dih_dy2 - dih_dy1) / 2.0,
        ],
        axis=-1,
    )
    dE = np.stack(
        [
            eh * (dew_dx1 + dew_dx2),
            ew * (deh_dy1 + deh_dy2),
            eh * (dew_dx2 - dew_dx1) / 2.0,
            ew * (deh_dy2 - deh_dy1) / 2.0,
        ],
        axis=-1,
    )
    zeros = np.zeros_like(area_p)
    dA = np.stack([zeros, zeros, p[..., 3], p[..., 2]], axis=-1)
    grad = c_inter[..., None] * dI + c_area[..., None] * dA + c_encl[..., None] * dE
    grad = np.where(has_encl[..., None], grad, 0.0)
    return giou, grad


def iou(b, g) -> float:
    p, q = check_boxes(b), check_boxes(g)
    pc, qc = to_corners(p), to_corners(q)
    iw = max(0.0, min(pc[2], qc[2]) - max(pc[0], qc[0]))
    ih = max(0.0, min(pc[3], qc[3]) - max(pc[1], qc[1]))
    inter = iw * ih
    union = p[2] * p[3] + q[2] * q[3] - inter
    return float(inter / union) if union > 0 else 0.0


def pairwise_iou(gt_boxes, pred_boxes) -> np.ndarray:
    g = check_boxes(gt_boxes).reshape(-1, 4)
    p = check_boxes(pred_boxes).reshape(-1, 4)
    gc, pc = to_corners(g)[:, None, :], to_corners(p)[None, :, :]
    iw = np.clip(np.minimum(gc[..., 2], pc[..., 2]) - np.maximum(gc[..., 0], pc[..., 0]), 0, None)
    ih = np.clip(np.minimum(gc[..., 3], pc[..., 3]) - np.maximum(gc[..., 1], pc[..., 1]), 0, None)
    inter = iw * ih
    union = (g[:, 2] * g[:, 3])[:, None] + (p[:, 2] * p[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def giou(b, g) -> float:
    return float(_giou_terms(_arr(b), _arr(g), with_grad=False)[0])


def giou_loss(b, g) -> float:
    return 1.0 - giou(b, g)


def giou_grad(b, g) -> np.ndarray:
    """d(1 - giou(b, g)) / d(cx, cy, w, h) of ``b``."""
    return -_giou_terms(_arr(b), _arr(g), with_grad=True)[1]


def pairwise_giou(gt_boxes, pred_boxes, with_grad: bool = False):
    """GIoU for every (gt, pred) pair: M x N values and optional M x N x 4 d/dpred."""
    g = check_boxes(gt_boxes).reshape(-1, 4)
    p = check_boxes(pred_boxes).reshape(-1, 4)
    return _giou_terms(p[None, :, :], g[:, None, :], with_grad)
