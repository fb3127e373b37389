"""GT-probe cross-attention.

Ground truths and predictions are embedded by two independent MLPs; the GT
embeddings act as attention queries against the prediction embeddings and the
row softmax of the scaled scores is the dense correspondence matrix ``A``
(M ground truths x N predictions, rows sum to one).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .cost import GroundTruthSet, PredictionSet
from .numkernel import (
    GradTape,
    MlpCache,
    MlpParams,
    ShapeError,
    mlp_backward,
    mlp_forward,
    softmax_rows,
    softmax_rows_backward,
)

CHECKPOINT_FORMAT = "matchfree-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class GtProbeParams:
    mlp_gt: MlpParams
    mlp_q: MlpParams
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    num_classes: int
    num_heads: int = 1
    pred_encoding: str = "logits"  # or "probs"
    box_freqs: int = 0  # sinusoidal box features appended to the raw coordinates

    def __post_init__(self):
        d = self.hidden_dim
        if self.mlp_q.out_dim != d:
            raise ShapeError(f"mlp_q output {self.mlp_q.out_dim} != mlp_gt output {d}")
        for name, w in (("W_Q", self.w_q), ("W_K", self.w_k), ("W_V", self.w_v)):
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {w.shape}")
        width = input_width(self.num_classes, self.box_freqs)
        if self.mlp_gt.in_dim != width or self.mlp_q.in_dim != width:
            raise ShapeError(f"probe MLPs must take {width} inputs")
        if self.num_heads < 1 or d % self.num_heads:
            raise ValueError(f"hidden dim {d} not divisible into {self.num_heads} heads")
        if self.pred_encoding not in ("logits", "probs"):
            raise ValueError(f"unknown prediction encoding {self.pred_encoding!r}")

    @property
    def hidden_dim(self) -> int:
        return self.mlp_gt.out_dim

    @classmethod
    def init(
        cls,
        num_classes: int,
        hidden_dim: int = 256,
        depth: int = 2,
        num_heads: int = 1,
        seed: int = 0,
        pred_encoding: str = "logits",
        box_freqs: int = 0,
        tied_init: bool = False,
        init_gain: float = 1.0,
    ) -> "GtProbeParams":
        """Fan-in uniform init.

        ``tied_init`` starts the prediction-side MLP and ``W_K`` as copies of the
        GT-side MLP and ``W_Q`` (they are still trained independently), so the
        initial scores behave like a similarity kernel between the encodings.
        ``init_gain`` multiplies the initial attention scores.
        """
        rng = np.random.default_rng(seed)
        sizes = [input_width(num_classes, box_freqs)] + [hidden_dim] * depth
        mlp_gt = MlpParams.init(sizes, rng)
        mlp_q = MlpParams.init(sizes, rng)
        bound = 1.0 / np.sqrt(hidden_dim)
        w_q, w_k, w_v = (rng.uniform(-bound, bound, (hidden_dim, hidden_dim)) for _ in range(3))
        if tied_init:
            mlp_q = MlpParams([w.copy() for w in mlp_gt.weights], [b.copy() for b in mlp_gt.biases])
            w_k = w_q.copy()
        w_q *= np.sqrt(init_gain)
        w_k *= np.sqrt(init_gain)
        return cls(mlp_gt, mlp_q, w_q, w_k, w_v, num_classes, num_heads, pred_encoding, box_freqs)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.mlp_gt.named_arrays("mlp_gt.")
        out.update(self.mlp_q.named_arrays("mlp_q."))
        out.update({"W_Q": self.w_q, "W_K": self.w_k, "W_V": self.w_v})
        return out

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        num_classes: int,
        num_heads: int = 1,
        pred_encoding: str = "logits",
        box_freqs: int = 0,
    ) -> "GtProbeParams":
        def mlp(prefix):
            ws, bs, i = [], [], 0
            while f"{prefix}{i}.weight" in arrays:
                ws.append(np.array(arrays[f"{prefix}{i}.weight"], dtype=np.float64))
                bs.append(np.array(arrays[f"{prefix}{i}.bias"], dtype=np.float64))
                i += 1
            return MlpParams(ws, bs)

        return cls(
            mlp("mlp_gt."),
            mlp("mlp_q."),
            np.array(arrays["W_Q"], dtype=np.float64),
            np.array(arrays["W_K"], dtype=np.float64),
            np.array(arrays["W_V"], dtype=np.float64),
            num_classes,
            num_heads,
            pred_encoding,
            box_freqs,
        )


def input_width(num_classes: int, box_freqs: int = 0) -> int:
    return num_classes + 4 + 8 * box_freqs


def _frequencies(box_freqs: int) -> np.ndarray:
    return np.pi * 2.0 ** np.arange(box_freqs)


def encode_boxes(boxes: np.ndarray, box_freqs: int = 0) -> np.ndarray:
    """Raw coordinates, followed by sin/cos at octave frequencies when requested."""
    if not box_freqs:
        return boxes
    ang = boxes[:, :, None] * _frequencies(box_freqs)  # (n, 4, F)
    n = len(boxes)
    return np.concatenate([boxes, np.sin(ang).reshape(n, -1), np.cos(ang).reshape(n, -1)], axis=1)


def encode_boxes_backward(boxes: np.ndarray, dfeat: np.ndarray, box_freqs: int = 0) -> np.ndarray:
    if not box_freqs:
        return dfeat
    freqs = _frequencies(box_freqs)
    ang = boxes[:, :, None] * freqs
    n, width = len(boxes), 4 * box_freqs
    dsin = dfeat[:, 4 : 4 + width].reshape(n, 4, -1)
    dcos = dfeat[:, 4 + width :].reshape(n, 4, -1)
    return dfeat[:, :4] + np.sum((dsin * np.cos(ang) - dcos * np.sin(ang)) * freqs, axis=2)


def encode_gts(gts: GroundTruthSet, num_classes: int, box_freqs: int = 0) -> np.ndarray:
    if len(gts) and gts.labels.max() >= num_classes:
        raise ValueError(f"label {gts.labels.max()} out of range for K={num_classes}")
    onehot = np.eye(num_classes)[gts.labels] if len(gts) else np.zeros((0, num_classes))
    return np.concatenate([onehot, encode_boxes(gts.boxes, box_freqs)], axis=1)


def encode_preds(preds: PredictionSet, encoding: str = "logits", box_freqs: int = 0) -> np.ndarray:
    cls_part = preds.logits if encoding == "logits" else softmax_rows(preds.logits)
    return np.concatenate([cls_part, encode_boxes(preds.boxes, box_freqs)], axis=1)


@dataclass
class EncodeCache:
    x_gt: np.ndarray
    x_q: np.ndarray
    gt: MlpCache
    q: MlpCache
    pred_probs: np.ndarray | None = None
    pred_boxes: np.ndarray | None = None


def encode(gts: GroundTruthSet, preds: PredictionSet, p: GtProbeParams):
    """Embed ground truths (M x D) and predictions (N x D)."""
    if preds.num_classes != p.num_classes:
        raise ValueError(f"predictions have K={preds.num_classes}, probe expects {p.num_classes}")
    x_gt = encode_gts(gts, p.num_classes, p.box_freqs)
    x_q = encode_preds(preds, p.pred_encoding, p.box_freqs)
    e_gt, c_gt = mlp_forward(p.mlp_gt, x_gt)
    e_q, c_q = mlp_forward(p.mlp_q, x_q)
    probs = x_q[:, : p.num_classes] if p.pred_encoding == "probs" else None
    return e_gt, e_q, EncodeCache(x_gt, x_q, c_gt, c_q, probs, preds.boxes)


@dataclass
class AttentionCache:
    e_gt: np.ndarray
    e_q: np.ndarray
    q: np.ndarray
    k: np.ndarray
    heads: list[np.ndarray]  # per-head attention maps
    values: np.ndarray | None = None  # A V, only when requested


def probe_forward(e_gt, e_q, p: GtProbeParams, compute_values: bool = False):
    """Dense correspondence ``A = softmax(Q K^T / sqrt(d_k))``, averaged over heads."""
    e_gt = np.asarray(e_gt, dtype=np.float64)
    e_q = np.asarray(e_q, dtype=np.float64)
    d = p.hidden_dim
    if e_gt.shape[1] != d or e_q.shape[1] != d:
        raise ShapeError(f"embeddings must have width {d}")
    n = e_q.shape[0]
    if n == 0:
        raise ValueError("correspondence needs at least one prediction")
    h = p.num_heads
    dh = d // h
    scale = 1.0 / np.sqrt(dh)
    q = e_gt @ p.w_q
    k = e_q @ p.w_k
    heads = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        heads.append(softmax_rows(q[:, sl] @ k[:, sl].T * scale))
    a = heads[0] if h == 1 else sum(heads) / h
    cache = AttentionCache(e_gt, e_q, q, k, heads)
    if compute_values:
        v = e_q @ p.w_v
        cache.values = np.concatenate(
            [heads[i] @ v[:, i * dh : (i + 1) * dh] for i in range(h)], axis=1
        )
    return a, cache


@dataclass
class ProbeCache:
    enc: EncodeCache
    att: AttentionCache


def correspondence(
    gts: GroundTruthSet, preds: PredictionSet, p: GtProbeParams, compute_values: bool = False
):
    e_gt, e_q, enc = encode(gts, preds, p)
    a, att = probe_forward(e_gt, e_q, p, compute_values)
    return a, ProbeCache(enc, att)


def probe_backward(
    dA, cache: ProbeCache, p: GtProbeParams, tape: GradTape, input_grad: bool = False
):
    """Accumulate parameter gradients of ``sum(dA * A)``.

    With ``input_grad`` the gradient w.r.t. the prediction inputs is returned as
    ``(dlogits, dboxes)``; otherwise ``None``.
    """
    att, enc = cache.att, cache.enc
    m, n = att.e_gt.shape[0], att.e_q.shape[0]
    dA = np.asarray(dA, dtype=np.float64) if m else np.zeros((0, n))
    if dA.shape != (m, n):
        raise ShapeError(f"dA shape {dA.shape} != ({m}, {n})")
    d, h = p.hidden_dim, p.num_heads
    dh = d // h
    scale = 1.0 / np.sqrt(dh)
    dq = np.zeros_like(att.q)
    dk = np.zeros_like(att.k)
    for i, a_h in enumerate(att.heads):
        sl = slice(i * dh, (i + 1) * dh)
        ds = softmax_rows_backward(a_h, dA / h) * scale
        dq[:, sl] = ds @ att.k[:, sl]
        dk[:, sl] = ds.T @ att.q[:, sl]
    tape.add("W_Q", att.e_gt.T @ dq)
    tape.add("W_K", att.e_q.T @ dk)
    tape.add("W_V", np.zeros_like(p.w_v))
    mlp_backward(p.mlp_gt, enc.gt, dq @ p.w_q.T, tape, "mlp_gt.")
    dx_q = mlp_backward(p.mlp_q, enc.q, dk @ p.w_k.T, tape, "mlp_q.")
    if not input_grad:
        return None
    k = p.num_classes
    dcls = dx_q[:, :k]
    dboxes = encode_boxes_backward(enc.pred_boxes, dx_q[:, k:], p.box_freqs)
    if enc.pred_probs is not None:
        dcls = softmax_rows_backward(enc.pred_probs, dcls)
    return dcls.copy(), dboxes.copy()


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as versioned JSON (floats round-trip exactly)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    return arrays, doc.get("meta", {})


def assign_arrays(target: Mapping[str, np.ndarray], source: Mapping[str, np.ndarray]) -> None:
    """Copy ``source`` into the matching arrays of ``target`` in place."""
    for name, dst in target.items():
        if name not in source:
            raise KeyError(f"checkpoint is missing {name}")
        src = source[name]
        if src.shape != dst.shape:
            raise ShapeError(f"{name}: checkpoint shape {src.shape} != {dst.shape}")
        dst[...] = src
