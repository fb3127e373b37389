"""Synthetic scenes, a tiny learnable prediction head, training and evaluation.

The head stands in for a detector decoder: ``N`` learnable query embeddings
pass through an MLP that emits ``K`` class logits and a sigmoid-squashed box.
Without scene conditioning the queries cannot see the image, so they learn to
tile the layout of the scene generator, which is enough to exercise the
assignment dynamics of either objective.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import geometry, gtprobe
from .cost import GroundTruthSet, PredictionSet, broadcast_cost, broadcast_cost_backward
from .hungarian import hungarian_match
from .losses import LossConfig, total_loss_forward_backward
from .numkernel import AdamState, GradTape, MlpParams, adam_step, mlp_backward, mlp_forward
from .scg import generate as scg_generate


class Objective(str, enum.Enum):
    MATCHFREE = "matchfree"
    HUNGARIAN = "hungarian"


class SceneError(RuntimeError):
    """The generator could not satisfy its layout constraints."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class ToyConfig:
    num_queries: int = 25
    num_classes: int = 4
    min_gts: int = 1
    max_gts: int = 5
    # scene layout: "grid" jitters boxes around the cells of a grid x grid
    # lattice, "uniform" places centers anywhere subject to min_separation
    layout: str = "grid"
    grid: int = 3
    center_jitter: float = 0.03
    min_size: float = 0.16
    max_size: float = 0.26
    min_separation: float = 0.2
    label_mode: str = "cell"  # "cell": class fixed per grid cell, "random"
    max_retries: int = 100
    probe_dim: int = 64
    probe_depth: int = 1
    probe_heads: int = 1
    probe_box_freqs: int = 3
    probe_tied_init: bool = True
    probe_init_gain: float = 30.0
    probe_pred_encoding: str = "probs"
    # match-free only: the first steps fit the probe alone (beta = 0, model frozen)
    probe_warmup: int = 600
    query_dim: int = 64
    head_hidden: int = 64
    # gain on the box rows of the head's last layer so that initial boxes
    # spread over the image instead of all sitting at (0.5, 0.5)
    box_init_gain: float = 4.0
    scene_conditioned: bool = False
    raster: int = 4
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    probe_lr: float | None = None  # defaults to lr
    weight_decay: float = 0.0
    seed: int = 0
    eval_seed: int = 12345
    eval_scenes: int = 200
    probe_set_scenes: int = 50
    eval_every: int = 250
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 1 <= self.min_gts <= self.max_gts:
            raise ValueError("need 1 <= min_gts <= max_gts")
        if self.num_classes < 1 or self.num_queries < 1:
            raise ValueError("need at least one class and one query")
        if self.layout not in ("grid", "uniform"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.label_mode not in ("cell", "random"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError("need 0 < min_size <= max_size <= 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class Scene:
    gts: GroundTruthSet
    seed: int


def _fit_size(center: float, size: float) -> float:
    return min(size, 2.0 * center, 2.0 * (1.0 - center))


def generate_scene(cfg: ToyConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    m = int(rng.integers(cfg.min_gts, cfg.max_gts + 1))
    if cfg.layout == "grid":
        cells = cfg.grid * cfg.grid
        if m > cells:
            raise SceneError(f"{m} objects do not fit a {cfg.grid}x{cfg.grid} grid")
        pitch = 1.0 / cfg.grid
        if pitch - 2 * cfg.center_jitter < cfg.min_separation:
            raise SceneError("grid pitch too small for the requested separation")
        chosen = np.sort(rng.choice(cells, size=m, replace=False))
        rows, cols = np.divmod(chosen, cfg.grid)
        cx = (cols + 0.5) * pitch + rng.uniform(-cfg.center_jitter, cfg.center_jitter, m)
        cy = (rows + 0.5) * pitch + rng.uniform(-cfg.center_jitter, cfg.center_jitter, m)
        if cfg.label_mode == "cell":
            labels = chosen % cfg.num_classes
        else:
            labels = rng.integers(0, cfg.num_classes, m)
    else:
        margin = cfg.min_size / 2
        for _ in range(cfg.max_retries):
            pts = rng.uniform(margin, 1 - margin, size=(m, 2))
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(m) * 9
            if d.min() >= cfg.min_separation:
                break
        else:
            raise SceneError(f"could not separate {m} centers after {cfg.max_retries} tries")
        cx, cy = pts[:, 0], pts[:, 1]
        labels = rng.integers(0, cfg.num_classes, m)
    w = rng.uniform(cfg.min_size, cfg.max_size, m)
    h = rng.uniform(cfg.min_size, cfg.max_size, m)
    w = np.array([_fit_size(c, s) for c, s in zip(cx, w)])
    h = np.array([_fit_size(c, s) for c, s in zip(cy, h)])
    boxes = np.stack([cx, cy, w, h], axis=1)
    return Scene(GroundTruthSet(labels, boxes), int(seed))


def scene_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def training_scenes(cfg: ToyConfig, step: int) -> list[Scene]:
    return [generate_scene(cfg, scene_seed(cfg.seed, 0, step, b)) for b in range(cfg.batch_size)]


def heldout_scenes(cfg: ToyConfig, count: int | None = None, tag: int = 1) -> list[Scene]:
    count = cfg.eval_scenes if count is None else count
    return [generate_scene(cfg, scene_seed(cfg.eval_seed, tag, k)) for k in range(count)]


def scene_raster(gts: GroundTruthSet, res: int) -> np.ndarray:
    """Per-cell fraction covered by the union of GT boxes (max over boxes), flattened."""
    out = np.zeros((res, res))
    if len(gts) == 0:
        return out.ravel()
    edges = np.linspace(0, 1, res + 1)
    corners = geometry.to_corners(gts.boxes)
    for x1, y1, x2, y2 in corners:
        ox = np.clip(np.minimum(edges[1:], x2) - np.maximum(edges[:-1], x1), 0, None) * res
        oy = np.clip(np.minimum(edges[1:], y2) - np.maximum(edges[:-1], y1), 0, None) * res
        out = np.maximum(out, oy[:, None] * ox[None, :])
    return out.ravel()


class ToyModel:
    """Learnable queries followed by a shared prediction MLP."""

    def __init__(self, cfg: ToyConfig, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.query_embed = rng.normal(0.0, 1.0, size=(cfg.num_queries, cfg.query_dim))
        in_dim = cfg.query_dim + (cfg.raster**2 if cfg.scene_conditioned else 0)
        self.head = MlpParams.init([in_dim, cfg.head_hidden, cfg.num_classes + 4], rng)
        self.head.weights[-1][:, cfg.num_classes :] *= cfg.box_init_gain

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"query_embed": self.query_embed}
        out.update(self.head.named_arrays("head."))
        return out

    def forward(self, scene: Scene | None = None):
        x = self.query_embed
        if self.cfg.scene_conditioned:
            gts = scene.gts if scene is not None else GroundTruthSet.empty()
            r = scene_raster(gts, self.cfg.raster)
            x = np.concatenate([x, np.broadcast_to(r, (len(x), r.size))], axis=1)
        out, cache = mlp_forward(self.head, x)
        k = self.cfg.num_classes
        boxes = 1.0 / (1.0 + np.exp(-out[:, k:]))
        return PredictionSet(out[:, :k].copy(), boxes), (cache, boxes)

    def backward(self, dlogits, dboxes, cache, tape: GradTape, prefix: str = "") -> None:
        mcache, boxes = cache
        dout = np.concatenate([dlogits, dboxes * boxes * (1.0 - boxes)], axis=1)
        dx = mlp_backward(self.head, mcache, dout, tape, prefix + "head.")
        tape.add(prefix + "query_embed", dx[:, : self.cfg.query_dim])


def new_probe(cfg: ToyConfig) -> gtprobe.GtProbeParams:
    return gtprobe.GtProbeParams.init(
        cfg.num_classes,
        cfg.probe_dim,
        cfg.probe_depth,
        cfg.probe_heads,
        seed=cfg.seed + 1,
        box_freqs=cfg.probe_box_freqs,
        tied_init=cfg.probe_tied_init,
        init_gain=cfg.probe_init_gain,
        pred_encoding=cfg.probe_pred_encoding,
    )


@dataclass
class EvalMetrics:
    matched_iou: float
    purity: float
    class_accuracy: float
    surviving_per_gt: float
    purity_by_scale: dict[str, float] = field(default_factory=dict)
    hungarian_purity: float = 0.0
    num_gts: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def scene_assignment_stats(gts, preds, a, loss_cfg: LossConfig, iou_threshold: float = 0.5):
    """Per-GT (iou, hit, class_ok, surviving, hungarian_hit, area) for one scene."""
    if len(gts) == 0:
        return []
    ious = geometry.pairwise_iou(gts.boxes, preds.boxes)
    best = np.argmax(a, axis=1)
    surv = scg_generate(a, loss_cfg.scg).hat.support_counts()
    c = broadcast_cost(gts, preds, loss_cfg.cost, loss_cfg.cls_mode, keep_components=False)
    hmatch = hungarian_match(c, pad_square=False).as_dict()
    pred_cls = np.argmax(preds.logits, axis=1)
    rows = []
    for i in range(len(gts)):
        j = int(best[i])
        rows.append(
            (
                float(ious[i, j]),
                ious[i, j] >= iou_threshold,
                pred_cls[j] == gts.labels[i],
                int(surv[i]),
                ious[i, hmatch[i]] >= iou_threshold if i in hmatch else False,
                float(gts.boxes[i, 2] * gts.boxes[i, 3]),
            )
        )
    return rows


def summarize(rows) -> EvalMetrics:
    if not rows:
        return EvalMetrics(0.0, 0.0, 0.0, 0.0)
    arr = np.array(rows, dtype=np.float64)
    areas = arr[:, 5]
    lo, hi = np.quantile(areas, [1 / 3, 2 / 3])
    by_scale = {}
    for name, sel in (("small", areas <= lo), ("medium", (areas > lo) & (areas <= hi)), ("large", areas > hi)):
        by_scale[name] = float(arr[sel, 1].mean()) if sel.any() else 0.0
    return EvalMetrics(
        matched_iou=float(arr[:, 0].mean()),
        purity=float(arr[:, 1].mean()),
        class_accuracy=float(arr[:, 2].mean()),
        surviving_per_gt=float(arr[:, 3].mean()),
        purity_by_scale=by_scale,
        hungarian_purity=float(arr[:, 4].mean()),
        num_gts=len(rows),
    )


def evaluate(
    model: ToyModel,
    probe: gtprobe.GtProbeParams,
    scenes: list[Scene],
    loss_cfg: LossConfig = LossConfig(),
    iou_threshold: float = 0.5,
) -> EvalMetrics:
    """Assignment quality of ``model`` read through the probe's argmax-A query."""
    rows = []
    for scene in scenes:
        preds, _ = model.forward(scene)
        if len(scene.gts) == 0:
            continue
        a, _ = gtprobe.correspondence(scene.gts, preds, probe)
        rows.extend(scene_assignment_stats(scene.gts, preds, a, loss_cfg, iou_threshold))
    return summarize(rows)


@dataclass
class TrainState:
    model: ToyModel
    probe: gtprobe.GtProbeParams
    adam: AdamState = field(default_factory=AdamState)
    probe_adam: AdamState = field(default_factory=AdamState)
    step: int = 0

    def params(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.named_arrays().items()}
        out.update({f"probe.{k}": v for k, v in self.probe.named_arrays().items()})
        return out


def matched_pair_step(gts, preds, loss_cfg: LossConfig):
    """Hungarian baseline: sum of the broadcast cost over the matched pairs."""
    c = broadcast_cost(gts, preds, loss_cfg.cost, loss_cfg.cls_mode, keep_components=False)
    match = hungarian_match(c, pad_square=False)
    dc = np.zeros_like(c.values)
    for i, j in match.pairs:
        dc[i, j] = 1.0
    dlogits, dboxes = broadcast_cost_backward(gts, preds, loss_cfg.cost, dc, loss_cfg.cls_mode)
    return match.total_cost, dlogits, dboxes


def _finite(x: float) -> bool:
    return math.isfinite(x)


def train(
    state: TrainState,
    objective: Objective | str = Objective.MATCHFREE,
    steps: int | None = None,
    loss_cfg: LossConfig = LossConfig(),
    log: Callable[[dict], None] | None = None,
    probe_scenes: list[Scene] | None = None,
) -> list[dict]:
    """Run ``steps`` optimisation steps from ``state.step``; returns the step log.

    MATCHFREE optimises ``alpha * L_w + beta * L_q`` after ``cfg.probe_warmup``
    probe-only steps (``L_w`` alone, model frozen). HUNGARIAN trains the
    predictions on the matched-pair cost and fits the probe with ``L_w`` alone;
    the probe never sends gradient to the predictions in that mode.
    """
    objective = Objective(objective)
    cfg = state.model.cfg
    steps = cfg.steps if steps is None else steps
    params = state.params()
    model_params = {k: v for k, v in params.items() if k.startswith("model.")}
    probe_params = {k: v for k, v in params.items() if k.startswith("probe.")}
    tape = GradTape(params)
    probe_cfg = replace(loss_cfg, beta=0.0, probe_input_grad=False, detach_cost_in_lw=True)
    if probe_scenes is None and cfg.eval_every:
        probe_scenes = heldout_scenes(cfg, cfg.probe_set_scenes, tag=2)
    records = []

    def diverged(rec, why):
        dump = {
            **rec,
            "objective": objective.value,
            "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()},
            "grad_norms": {k: float(np.linalg.norm(v)) for k, v in tape.grads.items()},
        }
        return TrainingDiverged(f"{why} at step {rec['step']}", dump)

    for _ in range(steps):
        step = state.step
        warmup = objective is Objective.MATCHFREE and step < cfg.probe_warmup
        tape.zero()
        inv_b = 1.0 / cfg.batch_size
        lw = lq = lt = 0.0
        for scene in training_scenes(cfg, step):
            try:
                preds, mcache = state.model.forward(scene)
            except ValueError as exc:
                nan = float("nan")
                raise diverged({"step": step, "L_w": nan, "L_q": nan, "L_total": nan}, str(exc)) from exc
            sub = GradTape()
            if objective is Objective.MATCHFREE:
                step_cfg = probe_cfg if warmup else loss_cfg
                out = total_loss_forward_backward(scene.gts, preds, state.probe, step_cfg, sub)
                dl, db = out.dlogits, out.dboxes
                rep = out.report
                # logged with the configured weights, also during warmup
                lw, lq = lw + rep.loss_w, lq + rep.loss_q
                lt += loss_cfg.alpha * rep.loss_w + loss_cfg.beta * rep.loss_q
            else:
                cost, dl, db = matched_pair_step(scene.gts, preds, loss_cfg)
                out = total_loss_forward_backward(scene.gts, preds, state.probe, probe_cfg, sub)
                lw, lq, lt = lw + out.report.loss_w, lq + cost, lt + cost
            state.model.backward(dl * inv_b, db * inv_b, mcache, tape, "model.")
            for name, g in sub.grads.items():
                tape.add("probe." + name, g * inv_b)
        rec = {"step": step, "L_w": lw * inv_b, "L_q": lq * inv_b, "L_total": lt * inv_b}
        if not all(_finite(rec[k]) for k in ("L_w", "L_q", "L_total")) or not all(
            np.all(np.isfinite(g)) for g in tape.grads.values()
        ):
            raise diverged(rec, "non-finite loss or gradient")
        probe_lr = cfg.lr if cfg.probe_lr is None else cfg.probe_lr
        if not warmup:
            adam_step(model_params, tape, state.adam, lr=cfg.lr, weight_decay=cfg.weight_decay)
        adam_step(probe_params, tape, state.probe_adam, lr=probe_lr, weight_decay=cfg.weight_decay)
        state.step += 1
        if cfg.eval_every and probe_scenes and state.step % cfg.eval_every == 0:
            rec["purity"] = evaluate(state.model, state.probe, probe_scenes, loss_cfg).purity
        records.append(rec)
        if log is not None:
            log(rec)
    return records


def save_state(path, state: TrainState, meta: dict | None = None) -> None:
    arrays = dict(state.params())
    for opt in (state.adam, state.probe_adam):
        arrays.update({f"adam.m.{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    info = {
        "step": state.step,
        "adam_step": state.adam.step,
        "probe_adam_step": state.probe_adam.step,
        "config": asdict(state.model.cfg),
    }
    info.update(meta or {})
    gtprobe.save_checkpoint(path, arrays, info)


def load_state(path, cfg: ToyConfig | None = None) -> tuple[TrainState, dict]:
    arrays, meta = gtprobe.load_checkpoint(path)
    if cfg is None:
        cfg = ToyConfig(**meta["config"])
    state = TrainState(ToyModel(cfg), new_probe(cfg))
    params = state.params()
    gtprobe.assign_arrays(params, {k: arrays[k] for k in params if k in arrays})
    def opt_state(prefix: str, step: int) -> AdamState:
        pick = lambda kind: {  # noqa: E731
            k[len(f"adam.{kind}.") :]: v
            for k, v in arrays.items()
            if k.startswith(f"adam.{kind}.{prefix}")
        }
        return AdamState(m=pick("m"), v=pick("v"), step=step)

    state.adam = opt_state("model.", int(meta["adam_step"]))
    state.probe_adam = opt_state("probe.", int(meta["probe_adam_step"]))
    state.step = int(meta["step"])
    return state, meta


def write_jsonl(path, records) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
