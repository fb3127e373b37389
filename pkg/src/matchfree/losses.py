"""Weight loss, query loss and their combined forward/backward pass.

``L_w = sum(A * C)`` trains the probe to put its attention on cheap pairs;
``L_q = sum(A_hat * C)`` trains the predictions on the pairs the sparse
correspondence selects. By default each loss only reaches its own target: C is
treated as a constant inside ``L_w`` and ``A_hat`` as a constant inside ``L_q``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gtprobe, scg
from .cost import (
    ClsMode,
    CostMatrix,
    CostWeights,
    GroundTruthSet,
    PredictionSet,
    broadcast_cost,
    broadcast_cost_backward,
)
from .numkernel import GradcheckReport, GradTape, ShapeError, gradcheck


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    detach_cost_in_lw: bool = True
    detach_corr_in_lq: bool = True
    # let L_w reach the predictions through the probe's input encoding
    probe_input_grad: bool = False
    per_gt_mean: bool = False
    cost: CostWeights = field(default_factory=CostWeights)
    cls_mode: ClsMode = ClsMode.NLL
    scg: scg.ScgConfig = field(default_factory=scg.ScgConfig)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        object.__setattr__(self, "cls_mode", ClsMode(self.cls_mode))


def _values(x) -> np.ndarray:
    if isinstance(x, CostMatrix):
        return x.values
    if isinstance(x, scg.SparseCorr):
        return x.values
    return np.asarray(x, dtype=np.float64)


def loss_w(a, c) -> float:
    a, c = _values(a), _values(c)
    if a.shape != c.shape:
        raise ShapeError(f"A {a.shape} and C {c.shape} differ")
    return float(np.sum(a * c))


def loss_q(a_hat, c) -> float:
    a_hat, c = _values(a_hat), _values(c)
    if a_hat.shape != c.shape:
        raise ShapeError(f"A_hat {a_hat.shape} and C {c.shape} differ")
    return float(np.sum(a_hat * c))


@dataclass
class LossReport:
    loss_w: float
    loss_q: float
    total: float
    per_gt_w: list[float]
    per_gt_q: list[float]
    surviving: list[int]

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra})


@dataclass
class StepOutputs:
    """Everything a training step needs after the forward/backward pass."""

    report: LossReport
    dlogits: np.ndarray
    dboxes: np.ndarray
    cost: CostMatrix
    a: np.ndarray
    trace: scg.ScgTrace


def total_loss_forward_backward(
    gts: GroundTruthSet,
    preds: PredictionSet,
    probe: gtprobe.GtProbeParams,
    cfg: LossConfig = LossConfig(),
    tape: GradTape | None = None,
    backward: bool = True,
) -> StepOutputs:
    """Compute ``alpha * L_w + beta * L_q`` and route its gradients.

    Probe parameter gradients are accumulated into ``tape``; prediction
    gradients are returned in the outputs.
    """
    m = len(gts)
    c = broadcast_cost(gts, preds, cfg.cost, cfg.cls_mode)
    a, pcache = gtprobe.correspondence(gts, preds, probe)
    trace = scg.generate(a, cfg.scg)
    a_hat = trace.hat.values
    scale = 1.0 / max(m, 1) if cfg.per_gt_mean else 1.0

    per_w = np.sum(a * c.values, axis=1)
    per_q = np.sum(a_hat * c.values, axis=1)
    lw, lq = scale * float(per_w.sum()), scale * float(per_q.sum())
    report = LossReport(
        loss_w=lw,
        loss_q=lq,
        total=cfg.alpha * lw + cfg.beta * lq,
        per_gt_w=per_w.tolist(),
        per_gt_q=per_q.tolist(),
        surviving=trace.hat.support_counts().astype(int).tolist(),
    )
    dlogits = np.zeros_like(preds.logits)
    dboxes = np.zeros_like(preds.boxes)
    out = StepOutputs(report, dlogits, dboxes, c, a, trace)
    if not backward or m == 0:
        return out
    if tape is None:
        tape = GradTape(probe.named_arrays())

    da = cfg.alpha * scale * c.values
    if not cfg.detach_corr_in_lq:
        da = da + scg.normalize_backward(cfg.beta * scale * c.values, trace.sparse, cfg.scg)
    dc = cfg.beta * scale * a_hat
    if not cfg.detach_cost_in_lw:
        dc = dc + cfg.alpha * scale * a

    routed = gtprobe.probe_backward(da, pcache, probe, tape, input_grad=cfg.probe_input_grad)
    if routed is not None:
        dlogits += routed[0]
        dboxes += routed[1]
    gl, gb = broadcast_cost_backward(gts, preds, cfg.cost, dc, cfg.cls_mode)
    dlogits += gl
    dboxes += gb
    return out


def coupled(cfg: LossConfig) -> LossConfig:
    """``cfg`` with every gradient path enabled, so the routed gradient is exact."""
    return replace(cfg, detach_cost_in_lw=False, detach_corr_in_lq=False, probe_input_grad=True)


def check_total_gradients(
    gts: GroundTruthSet,
    preds: PredictionSet,
    probe: gtprobe.GtProbeParams,
    cfg: LossConfig = LossConfig(),
    h: float = 1e-6,
    floor: float = 1e-3,
    corrupt: float = 0.0,
) -> GradcheckReport:
    """Central-difference check of ``L_total`` w.r.t. probe parameters and predictions.

    ``corrupt`` is a negative-control hook: it is added to one analytic entry.
    """
    cfg = coupled(cfg)
    params = {f"probe.{k}": v for k, v in probe.named_arrays().items()}
    params["pred.logits"] = preds.logits
    params["pred.boxes"] = preds.boxes

    def fn():
        tape = GradTape(probe.named_arrays())
        out = total_loss_forward_backward(gts, preds, probe, cfg, tape)
        grads = {f"probe.{k}": v for k, v in tape.grads.items()}
        grads["pred.logits"] = out.dlogits
        grads["pred.boxes"] = out.dboxes
        if corrupt:
            grads["pred.boxes"] = grads["pred.boxes"].copy()
            grads["pred.boxes"].flat[0] += corrupt
        return out.report.total, grads

    def value():
        return total_loss_forward_backward(gts, preds, probe, cfg, backward=False).report.total

    return gradcheck(fn, params, h=h, floor=floor, value=value)
