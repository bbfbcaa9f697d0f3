"""Dense numerics kernel: a small reverse-mode tape over numpy arrays.

Every network and loss in the package is built from the ops in this module.
Arrays are float64; a ``Tensor`` records the ops that produced it so that
``loss.backward()`` fills ``.grad`` on every leaf created with
``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from fairvae.errors import ShapeError, TrainingError

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
LOGVAR_CLIP = 10.0

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, adversary inputs)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Deterministic PCG64 stream. A sequence seed derives an independent child stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-d operands; raises ShapeError on mismatched inner dims."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T, (a,), lambda g: (g.T,))


def take(a: Tensor, index) -> Tensor:
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis) * (1.0 / count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient inside [lo, hi] and zero outside."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def selu_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu(a) -> Tensor:
    """Scaled exponential linear unit with the self-normalizing constants."""
    a = _lift(a)
    ad = a.data
    out = selu_array(ad)
    slope = np.where(ad > 0, SELU_LAMBDA, out + SELU_LAMBDA * SELU_ALPHA)
    return _record(out, (a,), lambda g: (g * slope,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    factor = np.where(ad > 0, 1.0, slope)
    return _record(ad * factor, (a,), lambda g: (g * factor,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = sigmoid_array(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.minimum(ad, 0.0) - np.log1p(np.exp(-np.abs(ad)))
    return _record(out, (a,), lambda g: (g * sigmoid_array(-ad),))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of an array, stabilized by subtracting the row max."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(a: Tensor) -> Tensor:
    out = log_softmax_array(a.data)
    probs = np.exp(out)
    return _record(out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy -[t log s(l) + (1-t) log(1-s(l))]."""
    t = np.asarray(targets, dtype=np.float64)
    ld = logits.data
    out = np.maximum(ld, 0.0) - ld * t + np.log1p(np.exp(-np.abs(ld)))
    return _record(out, (logits,), lambda g: (g * (sigmoid_array(ld) - t),))


def gaussian_sample(mean, log_var, rng: np.random.Generator | None = None,
                    eps: np.ndarray | None = None) -> Tensor:
    """Reparameterized draw ``mean + exp(0.5 * log_var) * eps``.

    ``eps`` defaults to standard-normal noise from ``rng``. Only the upper end of
    ``log_var`` is clamped here; a log-variance of -inf yields the mean exactly.
    """
    mean, log_var = _lift(mean), _lift(log_var)
    if mean.shape != log_var.shape:
        raise ShapeError(f"mean {mean.shape} and log_var {log_var.shape} differ")
    if eps is None:
        if rng is None:
            raise ValueError("gaussian_sample needs either rng or eps")
        eps = rng.standard_normal(mean.shape)
    eps = np.asarray(eps, dtype=np.float64)
    lv = np.minimum(log_var.data, LOGVAR_CLIP)
    std = np.exp(0.5 * lv)
    below = log_var.data <= LOGVAR_CLIP
    return _record(mean.data + std * eps, (mean, log_var),
                   lambda g: (g, g * 0.5 * std * eps * below))


@dataclass
class OptimizerState:
    """Adam moment accumulators keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns new parameter arrays and a new state.

    Parameters with no entry in ``grads`` are treated as having a zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    new_m, new_v, new_params = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state


class Adam:
    """Stateful wrapper applying ``adam_step`` in place to a set of named tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        updated, self.state = adam_step(arrays, grads, self.state)
        for k, p in self.params.items():
            p.data = updated[k]


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                      tolerance: float = 1e-4, eps: float = 1e-5,
                      max_coords: int = 60, seed: int = 0,
                      abs_floor: float = 1e-6) -> float:
    """Compare tape gradients with central differences; return the max relative error.

    ``loss_fn`` rebuilds the scalar loss from the current values of ``params`` and must
    be deterministic. Up to ``max_coords`` coordinates per parameter are sampled.
    The relative error is ``|a - n| / max(|a|, |n|, abs_floor)``. A result above
    ``tolerance`` is returned as-is; callers decide whether to fail.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = make_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(loss_fn().data)
            flat[c] = orig - eps
            down = float(loss_fn().data)
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            an = float(a.reshape(-1)[c])
            denom = max(abs(an), abs(numeric), abs_floor)
            worst = max(worst, abs(an - numeric) / denom)
    for p in params:
        p.grad = None
    if not math.isfinite(worst):
        return math.inf
    return worst
