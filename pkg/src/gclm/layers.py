"""Parameterized building blocks shared by the mini language model and the GNNs."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
_PARAM_MAGIC = b"GCLM-PARAMS"
_PARAM_VERSION = 1


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Attribute-walking container; parameters are listed in declaration order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(state):
            raise ValueError(f"state has {len(state)} arrays, module has {len(params)} parameters")
        for p, arr in zip(params, state):
            if p.shape != arr.shape:
                raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {arr.shape}")
            p.data[...] = arr

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            if not value.name:
                value.name = name
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, INIT_STD, size=(n_in, n_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add_broadcast(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Embedding(Module):
    """Token table plus learned absolute positions."""

    def __init__(self, vocab_size: int, d: int, max_len: int, rng: np.random.Generator):
        self.table = parameter(rng.normal(0.0, INIT_STD, size=(vocab_size, d)))
        self.positional = parameter(rng.normal(0.0, INIT_STD, size=(max_len, d)))

    def lookup(self, ids) -> Tensor:
        return T.take_rows(self.table, ids)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    return T.dropout(x, p, training, rng)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over [B, L, d] inputs."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"head count {heads} must divide model dimension {d}")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self._heads = heads
        self._d = d
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor, b: int, L: int) -> Tensor:
        dh = self._d // self._heads
        return T.transpose(T.reshape(x, (b, L, self._heads, dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
            mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        b, L, d = x.shape
        if mask is not None and np.shape(mask) != (b, L):
            raise ValueError(f"mask shape {np.shape(mask)} does not match sequence shape {(b, L)}")
        dh = d // self._heads
        q = self._split(self.q(x), b, L)
        k = self._split(self.k(x), b, L)
        v = self._split(self.v(x), b, L)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.mask_fill(scores, ~np.asarray(mask, dtype=bool)[:, None, None, :])
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, L, d))
        out = self.o(ctx)
        return T.reshape(out, (L, d)) if squeeze else out


class TransformerBlock(Module):
    """Post-LN encoder block: attention, add, norm, feed-forward, add, norm."""

    def __init__(self, d: int, heads: int, ff: int, rng: np.random.Generator, p_drop: float = 0.1):
        self.attention = MultiHeadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff_in = Linear(d, ff, rng)
        self.ff_out = Linear(ff, d, rng)
        self.norm2 = LayerNorm(d)
        self._p = p_drop

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        a = dropout(self.attention(x, mask), self._p, training, rng)
        h = self.norm1(T.add(x, a))
        f = dropout(self.ff_out(T.gelu(self.ff_in(h))), self._p, training, rng)
        return self.norm2(T.add(h, f))


def save_parameters(module: Module, path: str | Path, name: str | None = None) -> None:
    """Header line + JSON shape manifest + little-endian float64 payload."""
    params = module.parameters()
    header = {
        "version": _PARAM_VERSION,
        "module": name or type(module).__name__,
        "names": [p.name for p in params],
        "shapes": [list(p.shape) for p in params],
    }
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC + b" %d\n" % _PARAM_VERSION)
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for p in params:
            fh.write(p.data.astype("<f8").tobytes())


def load_parameters(module: Module, path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().split()
        if not magic or magic[0] != _PARAM_MAGIC or int(magic[1]) != _PARAM_VERSION:
            raise ValueError(f"{path}: not a version-{_PARAM_VERSION} parameter file")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    params = module.parameters()
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != [p.shape for p in params]:
        raise ValueError(f"{path}: parameter shapes do not match module {type(module).__name__}")
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != sum(p.size for p in params):
        raise ValueError(f"{path}: payload length does not match header")
    offset = 0
    for p in params:
        p.data[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return header
