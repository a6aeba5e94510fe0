"""A small float64 tensor engine with reverse-mode differentiation.

Forward functions record their inputs on the output tensor; `backward`
walks the graph in reverse topological order and looks up each node's
rule in BACKWARD_RULES. Rules return one gradient per parent (None for
constant inputs).
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from decode_lab.errors import InvariantError, ShapeError

logger = logging.getLogger("decode_lab.autodiff")

_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.parents: Tuple["Tensor", ...] = ()
        self.op: Optional[str] = None
        self.ctx: Dict = {}

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], **ctx) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.op = op
        out.ctx = ctx
    return out


# --- Primitives ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or a batched product of two 3-D stacks."""
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result(np.matmul(a.data, b.data), "matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _result(a.data + b.data, "add", (a, b), bias=False)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _result(a.data + b.data, "add", (a, b), bias=True)
    raise ShapeError("add", a.shape, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _result(a.data * b.data, "mul", (a, b))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, "scale", (a,), factor=factor)


def total(a: Tensor) -> Tensor:
    return _result(np.array(a.data.sum()), "sum", (a,))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.data.size)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, (int(ids.max()) + 1,))
    return _result(table.data[ids], "embedding_lookup", (table,), ids=ids)


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return _result(exp / exp.sum(axis=-1, keepdims=True), "softmax", (a,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * rstd
    return _result(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), xhat=xhat, rstd=rstd)


def relu(a: Tensor) -> Tensor:
    return _result(np.maximum(a.data, 0.0), "relu", (a,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, reference)) if i != axis % len(reference)
        ):
            raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, axis=axis, sizes=sizes)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError("slice", a.shape, (start, stop))
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return _result(a.data[tuple(index)], "slice", (a,), index=tuple(index))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    return _result(np.transpose(a.data, axes), "transpose", (a,), axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", a.shape, tuple(shape)) from e
    return _result(data, "reshape", (a,))


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    if not train or p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, "dropout", (a,), keep=keep)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_id: int = 0) -> Tensor:
    """Mean negative log-likelihood over target positions not equal to `ignore_id`."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    valid = targets != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise InvariantError("cross_entropy: every target position is ignored")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -log_probs[rows, targets[rows]].sum() / count
    return _result(np.array(loss), "cross_entropy", (logits,), log_probs=log_probs, targets=targets, rows=rows, count=count)


def binary_cross_entropy_with_logits(logits: Tensor, labels: Sequence[float]) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    loss = np.maximum(x, 0.0) - x * labels + np.log1p(np.exp(-np.abs(x)))
    return _result(np.array(loss.mean()), "bce_logits", (logits,), labels=labels)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# --- Backward rules ---

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _add_backward(out, g):
    a, b = out.parents
    if out.ctx["bias"]:
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)
    return g, g


def _softmax_backward(out, g):
    y = out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _layer_norm_backward(out, g):
    x, gamma, beta = out.parents
    xhat, rstd = out.ctx["xhat"], out.ctx["rstd"]
    dxhat = g * gamma.data
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    d = gamma.shape[0]
    return dx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)


def _embedding_backward(out, g):
    table = out.parents[0]
    grad = np.zeros_like(table.data)
    np.add.at(grad, out.ctx["ids"], g)
    return (grad,)


def _concat_backward(out, g):
    bounds = np.cumsum(out.ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=out.ctx["axis"]))


def _slice_backward(out, g):
    grad = np.zeros_like(out.parents[0].data)
    grad[out.ctx["index"]] = g
    return (grad,)


def _cross_entropy_backward(out, g):
    log_probs, targets, rows = out.ctx["log_probs"], out.ctx["targets"], out.ctx["rows"]
    grad = np.zeros_like(log_probs)
    grad[rows] = np.exp(log_probs[rows])
    grad[rows, targets[rows]] -= 1.0
    return (grad * (g / out.ctx["count"]),)


def _bce_backward(out, g):
    x = out.parents[0].data
    labels = out.ctx["labels"]
    return ((expit(x) - labels) * (g / x.size),)


BACKWARD_RULES: Dict[str, Callable[[Tensor, np.ndarray], Tuple[Optional[np.ndarray], ...]]] = {
    "matmul": lambda out, g: (g @ _swap(out.parents[1].data), _swap(out.parents[0].data) @ g),
    "add": _add_backward,
    "mul": lambda out, g: (g * out.parents[1].data, g * out.parents[0].data),
    "scale": lambda out, g: (g * out.ctx["factor"],),
    "sum": lambda out, g: (np.full(out.parents[0].shape, float(g)),),
    "embedding_lookup": _embedding_backward,
    "softmax": _softmax_backward,
    "layer_norm": _layer_norm_backward,
    "relu": lambda out, g: (g * (out.parents[0].data > 0),),
    "concat": _concat_backward,
    "slice": _slice_backward,
    "transpose": lambda out, g: (np.transpose(g, np.argsort(out.ctx["axes"])),),
    "reshape": lambda out, g: (g.reshape(out.parents[0].shape),),
    "dropout": lambda out, g: (g * out.ctx["keep"],),
    "cross_entropy": _cross_entropy_backward,
    "bce_logits": _bce_backward,
}


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> Optional[List[np.ndarray]]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's `.grad`.

    When `params` is given, their gradients are returned in order, with zeros
    for parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise InvariantError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, BACKWARD_RULES[node.op](node, g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                grads[id(parent)] = pg if id(parent) not in grads else grads[id(parent)] + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# --- Optimizer ---

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: Optional[float] = None) -> AdamState:
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step", (len(params),), (len(grads),), (len(state.m),))
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError("adam_step", p.shape, np.shape(g), m.shape)
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise InvariantError(f"adam_step: learning rate must be positive, got {lr}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state


# --- Finite differences ---

def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Dict[str, Tensor]],
    eps: float = 1e-5,
    coords_per_tensor: int = 64,
    resolution: float = 1e-4,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Per tensor the `coords_per_tensor` coordinates with the largest analytic
    gradient are checked together with as many coordinates drawn at random.
    A checked coordinate is compared when either derivative reaches
    `resolution`; below that both sit under the central-difference noise
    floor. A rule that shrinks or zeroes gradients therefore still fails on
    the coordinates where the numeric derivative is large.
    """
    named = list(params.items()) if isinstance(params, dict) else [(p.name or str(i), p) for i, p in enumerate(params)]
    tensors = [p for _, p in named]
    zero_grad(tensors)
    analytic = backward(loss_fn(), tensors)
    rng = np.random.default_rng(seed)

    def numeric(p: Tensor, flat_index: int) -> float:
        flat = p.data.reshape(-1)
        original = flat[flat_index]
        with no_grad():
            flat[flat_index] = original + eps
            plus = loss_fn().item()
            flat[flat_index] = original - eps
            minus = loss_fn().item()
        flat[flat_index] = original
        return (plus - minus) / (2.0 * eps)

    worst = 0.0
    for (name, p), grad in zip(named, analytic):
        a = grad.reshape(-1)
        count = min(coords_per_tensor, a.size)
        largest = np.argsort(-np.abs(a), kind="stable")[:count]
        sampled = rng.choice(a.size, size=count, replace=False)
        candidates = np.unique(np.concatenate([largest, sampled]))
        skipped = 0
        for index in candidates:
            n = numeric(p, int(index))
            if max(abs(a[index]), abs(n)) < resolution:
                skipped += 1
                continue
            error = abs(a[index] - n) / max(1e-8, abs(a[index]) + abs(n))
            if error > 1e-2:
                logger.debug(f"{name}[{index}]: analytic {a[index]:.3e} numeric {n:.3e}")
            worst = max(worst, error)
        if skipped:
            logger.debug(f"{name}: skipped {skipped} of {candidates.size} coordinates below resolution {resolution:g}")
    zero_grad(tensors)
    return worst
