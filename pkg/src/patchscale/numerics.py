"""Small reverse-mode autodiff over 2-D float64 arrays.

Every value is a :class:`Tensor` wrapping a ``(rows, cols)`` array. Operations
record a closure that pushes gradients to their inputs; :func:`backward` walks
the recorded graph in reverse topological order. Only the handful of ops the
attention block and the actor/critic networks need are provided.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _as_2d(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"Tensor data must be at most 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_2d(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by tensor op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- binary ops ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out_data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out_data, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return g, -g

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data

    def backward(g):
        return np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)

    return _result(np.minimum(a.data, b.data), (a, b), backward)


# -- unary ops ----------------------------------------------------------------


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def elementwise(a, f: Callable, df: Callable) -> Tensor:
    """Apply ``f`` elementwise; ``df(x, y)`` gives the derivative from input x and output y."""
    a = as_tensor(a)
    with np.errstate(all="ignore"):  # non-finite results are reported by _result
        y = f(a.data)
    return _result(y, (a,), lambda g: (g * df(a.data, y),))


def sigmoid(a) -> Tensor:
    def f(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return elementwise(a, f, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return elementwise(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def tanh(a) -> Tensor:
    return elementwise(a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a) -> Tensor:
    return elementwise(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return elementwise(a, np.log, lambda x, y: 1.0 / x)


def square(a) -> Tensor:
    return elementwise(a, np.square, lambda x, y: 2.0 * x)


def clip(a, lo: float, hi: float) -> Tensor:
    return elementwise(
        a, lambda x: np.clip(x, lo, hi), lambda x, y: ((x > lo) & (x < hi)).astype(np.float64)
    )


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(y, (a,), backward)


def pick(a, index: Sequence[int]) -> Tensor:
    """Gather one column per row: ``out[i, 0] = a[i, index[i]]``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.rows,):
        raise ValueError(f"pick: need {a.rows} indices, got shape {idx.shape}")
    rows = np.arange(a.rows)

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _result(a.data[rows, idx].reshape(-1, 1), (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _result(
        np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),)
    )


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def sum_cols(a) -> Tensor:
    """Row sums as an (rows, 1) column."""
    a = as_tensor(a)
    return _result(
        a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, a.cols, 1),)
    )


def dropout(a, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng is None`` (eval mode)."""
    if p <= 0.0 or rng is None:
        return as_tensor(a)
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(as_tensor(a).shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# -- graph traversal ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded forward graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- layers -------------------------------------------------------------------


class Module:
    """Container with an ordered dict of named parameter tensors."""

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                for sub_key, p in value.parameters().items():
                    out[f"{key}.{sub_key}"] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


class DenseLayer(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float | None = None):
        std = init_scale if init_scale is not None else np.sqrt(1.0 / n_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, n_out)), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return out


class GatedBlock(Module):
    """Squeeze-excitation style gating: ``x * sigmoid(W2 relu(W1 x + b1) + b2)``.

    The input rows are already pooled feature vectors, so the squeeze step is
    the bottleneck projection itself.
    """

    def __init__(self, dim: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(1, dim // reduction)
        self.squeeze = DenseLayer(dim, hidden, rng)
        self.excite = DenseLayer(hidden, dim, rng)

    def gates(self, x) -> Tensor:
        return sigmoid(self.excite(relu(self.squeeze(x))))

    def __call__(self, x) -> Tensor:
        return mul(x, self.gates(x))


# -- finite differences ---------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the forward graph from the current parameter values and
    returns a scalar tensor. Parameters are perturbed in place and restored.
    If ``analytic`` is omitted the gradients come from :func:`backward`.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        backward(f())
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = f().item()
            flat[k] = orig - h
            f_minus = f().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(numeric), abs(g[k]), floor)
            worst = max(worst, abs(numeric - g[k]) / denom)
    return worst


# -- serialization ------------------------------------------------------------------


def params_to_json(params: "OrderedDict[str, Tensor] | dict[str, np.ndarray]") -> dict:
    """Shape + flat decimal list per parameter; floats round-trip exactly via repr."""
    out = {}
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        out[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
    return out


def params_from_json(blob: dict) -> dict[str, np.ndarray]:
    return {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in blob.items()
    }


def load_into(module: Module, arrays: dict[str, np.ndarray]) -> None:
    params = module.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise KeyError(f"snapshot is missing parameters: {sorted(missing)}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"{name}: snapshot shape {arrays[name].shape} != {p.shape}")
        p.data = arrays[name].astype(np.float64).copy()
