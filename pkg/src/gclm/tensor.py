"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward`` walks the
recorded graph in reverse topological order (the tape) and accumulates
gradients additively, so a tensor consumed by several branches receives the
sum of the branch gradients.

Set ``GCLM_DEBUG=1`` to check every forward result for NaN/inf.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True
_DEBUG = os.environ.get("GCLM_DEBUG", "") not in ("", "0")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when an operation receives or produces non-finite values."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph.

    ``data`` is a C-contiguous float64 ndarray (row-major flat storage with a
    shape). ``grad`` is ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=DTYPE, copy=True)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == DTYPE else arr.astype(DTYPE)
        t.grad = None
        t.requires_grad = False
        t.frozen = False
        t.name = ""
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return tsum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in output")


def _node(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Create the output tensor; attach graph edges only when a parent needs grad."""
    if _DEBUG and op not in ("mask_fill",):
        _check_finite(out, op)
    t = Tensor._wrap(out)
    t.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls (call ``zero_grad`` between steps);
    interior node gradients are overwritten.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_broadcast(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b's shape is a trailing suffix of x's shape (bias, positions)."""
    nb = b.ndim
    if nb > x.ndim or x.shape[x.ndim - nb:] != b.shape:
        raise DimensionError(f"add_broadcast: {b.shape} is not a suffix of {x.shape}")
    lead = x.ndim - nb

    def bw(g):
        gb = g.reshape((-1,) + b.shape).sum(axis=0) if lead else g
        return g, gb

    return _node(x.data + b.data, (x, b), bw, "add_broadcast")


def mask_fill(x: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``mask`` (broadcastable bool) is True with a constant."""
    mask = np.broadcast_to(mask, x.shape)
    out = np.where(mask, value, x.data)
    return _node(out, (x,), lambda g: (np.where(mask, 0.0, g),), "mask_fill")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports [m,k]@[k,n], batched [...,m,k]@[k,n] (shared right operand) and
    equal-batch [...,m,k]@[...,k,n].
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    return _node(np.where(xd > 0, xd, slope * xd), (x,),
                 lambda g: (np.where(xd > 0, g, slope * g),), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), bw, "gelu")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    return _node(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a), "maximum")


_ELEMENTWISE = {"relu": relu, "tanh": tanh, "gelu": gelu, "identity": lambda x: x}
_BINARY = {"add": add, "multiply": mul}


def apply_elementwise(x: Tensor, fn: str, other: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: relu, tanh, gelu, add, multiply, scale."""
    if fn in _ELEMENTWISE:
        return _ELEMENTWISE[fn](x)
    if fn in _BINARY:
        if not isinstance(other, Tensor):
            raise TypeError(f"{fn} needs a tensor operand")
        return _BINARY[fn](x, other)
    if fn == "scale":
        return scale(x, float(other))
    raise ValueError(f"unknown elementwise function {fn!r}")


# ---------------------------------------------------------------------------
# normalisation


def _require_finite_input(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite_input(x, "softmax")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite_input(x, "log_softmax")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _node(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs last dim {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        dgamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _node(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    """Indexing with copy semantics; advanced indices scatter-add on backward."""
    shape = x.shape
    out = np.array(x.data[idx], dtype=DTYPE)

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), bw, "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; output shape is ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: ids outside [0, {table.shape[0]})")
    shape = table.shape
    out = table.data[ids]

    def bw(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _node(out, (table,), bw, "take_rows")


def scatter_rows(base: np.ndarray, ids, rows: Tensor) -> Tensor:
    """Copy of constant ``base`` with ``rows`` written at ``ids``.

    Only ``rows`` is differentiable; the untouched rows are detached snapshots.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if rows.shape != (len(ids),) + base.shape[1:]:
        raise DimensionError(f"scatter_rows: rows {rows.shape} vs base {base.shape} with {len(ids)} ids")
    out = np.array(base, dtype=DTYPE, copy=True)
    out[ids] = rows.data
    return _node(out, (rows,), lambda g: (g[ids],), "scatter_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(out, tensors, bw, "concat")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {b} logit rows vs {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _node(np.array(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient oracle


def _fd_grad(f: Callable[[], Tensor], arr: np.ndarray, step: float, coords: Iterable[int]) -> dict[int, float]:
    flat = arr.reshape(-1)
    out = {}
    with no_grad():
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            up = f().item()
            flat[k] = orig - step
            down = f().item()
            flat[k] = orig
            out[k] = (up - down) / (2.0 * step)
    return out


def _rel_err(ad: float, fd: float) -> float:
    return abs(ad - fd) / max(1.0, abs(ad), abs(fd))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    probe = Tensor(x.data, requires_grad=True)
    loss = f(probe)
    backward(loss)
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    fd = _fd_grad(lambda: f(probe), probe.data, step, range(probe.size))
    g_flat = g_ad.reshape(-1)
    return max((_rel_err(g_flat[k], v) for k, v in fd.items()), default=0.0)


def finite_diff_check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Gradient check of a closure w.r.t. parameters it reads, perturbing them in place.

    ``max_coords`` samples at most that many coordinates per parameter.
    """
    for p in params:
        p.grad = None
    backward(f())
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        g = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
        coords = range(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        for k, v in _fd_grad(f, p.data, step, coords).items():
            worst = max(worst, _rel_err(g[k], v))
    return worst
