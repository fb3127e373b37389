"""Dense float64 numeric substrate.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. This module
adds the few pieces the rest of the package needs on top of numpy: checked
products, a stabilised row softmax, ReLU MLPs with a hand-written backward
pass, a central-difference gradient checker and an Adam optimizer that
updates named arrays in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(ArithmeticError):
    """Raised when a function under test returns a non-finite value."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with row-max subtraction."""
    m = as_matrix(m)
    if m.shape[1] == 0:
        raise ShapeError("softmax over an empty row is undefined")
    if m.shape[0] == 0:
        return m.copy()
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # J^T dy for each row of y = softmax(x)
    return y * (dy - np.sum(dy * y, axis=1, keepdims=True))


@dataclass
class MlpParams:
    """Stack of affine layers with ReLU between them (none after the last)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("MLP needs one bias per weight and at least one layer")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i} input {w.shape[0]} != layer {i - 1} output "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @classmethod
    def init(cls, sizes: Iterable[int], rng: np.random.Generator) -> "MlpParams":
        """Fan-in scaled uniform init, zero biases."""
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}{i}.weight"] = w
            out[f"{prefix}{i}.bias"] = b
        return out


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer


def mlp_forward(p: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    h = as_matrix(x, "x")
    if h.shape[1] != p.in_dim:
        raise ShapeError(f"input width {h.shape[1]} != MLP input dim {p.in_dim}")
    cache = MlpCache([], [])
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h, cache


class GradTape:
    """Gradient buffers keyed by parameter name, mirroring parameter shapes."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.grads: dict[str, np.ndarray] = {}
        if params:
            self.track(params)

    def track(self, params: Mapping[str, np.ndarray]) -> None:
        for name, arr in params.items():
            self.grads[name] = np.zeros_like(arr, dtype=np.float64)

    def add(self, name: str, g: np.ndarray) -> None:
        buf = self.grads.get(name)
        if buf is None:
            self.grads[name] = np.array(g, dtype=np.float64)
            return
        if buf.shape != np.shape(g):
            raise ShapeError(f"gradient for {name}: {np.shape(g)} != {buf.shape}")
        buf += g

    def zero(self) -> None:
        for buf in self.grads.values():
            buf.fill(0.0)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def max_abs(self) -> float:
        return max((float(np.abs(g).max()) for g in self.grads.values() if g.size), default=0.0)


def mlp_backward(
    p: MlpParams, cache: MlpCache, dy, tape: GradTape, prefix: str = ""
) -> np.ndarray:
    """Accumulate parameter gradients into ``tape`` and return d(input)."""
    if len(cache.inputs) != len(p.weights):
        raise ShapeError("cache does not belong to this MLP")
    g = as_matrix(dy, "dy")
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"dy shape {g.shape} != output shape {cache.pre[-1].shape}")
    last = len(p.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (cache.pre[i] > 0.0)
        tape.add(f"{prefix}{i}.weight", cache.inputs[i].T @ g)
        tape.add(f"{prefix}{i}.bias", g.sum(axis=0))
        g = g @ p.weights[i].T
    return g


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    per_param: dict[str, float]
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def relative_error(analytic, numeric, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor turns the comparison into an absolute one for gradients whose
    magnitude is below it, where central-difference round-off dominates.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    fn: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-3,
    value: Callable[[], float] | None = None,
) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``fn`` evaluates the loss at the current contents of ``params`` and returns
    ``(loss, grads)``; the arrays in ``params`` are perturbed in place and
    restored afterwards. Names missing from ``grads`` are taken as zero.
    ``value``, if given, is a cheaper loss-only callable used for the
    perturbed evaluations.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    loss0, grads = fn()
    if not np.isfinite(loss0):
        raise EvaluationError(f"non-finite loss {loss0}")
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    if value is None:
        value = lambda: fn()[0]  # noqa: E731
    worst_err, worst, per_param, checked = 0.0, None, {}, 0
    for name, arr in params.items():
        analytic = grads.get(name, np.zeros_like(arr))
        if analytic.shape != arr.shape:
            raise ShapeError(f"gradient for {name}: {analytic.shape} != {arr.shape}")
        numeric = np.zeros_like(arr, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = value()
            arr[idx] = orig - h
            fm = value()
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite loss while perturbing {name}{idx}")
            numeric[idx] = (fp - fm) / (2.0 * h)
            checked += 1
        if arr.size == 0:
            per_param[name] = 0.0
            continue
        err = relative_error(analytic, numeric, floor)
        per_param[name] = float(err.max())
        if per_param[name] >= worst_err:
            worst_err = per_param[name]
            worst = (name, tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape)))
    return GradcheckReport(worst_err, worst, per_param, checked)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray] | GradTape,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam update applied in place; decoupled weight decay if nonzero."""
    if isinstance(grads, GradTape):
        grads = grads.grads
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name}: {g.shape} != {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} does not match parameter")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
