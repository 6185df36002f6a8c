"""GCN and GAT layers over dense adjacency, and the stacked node encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Module, dropout, parameter
from .tensor import DimensionError, Tensor

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": T.relu,
    "tanh": T.tanh,
}


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got shape {A.shape}")
    return np.maximum(A, A.T)


def with_self_loops(A) -> np.ndarray:
    S = (symmetrize(A) > 0).astype(np.float64)
    np.fill_diagonal(S, 1.0)
    return S


def normalize_adjacency(A) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 of the symmetrized graph, degrees taken from A + I."""
    S = with_self_loops(A)
    inv_sqrt = 1.0 / np.sqrt(S.sum(axis=1))
    return Tensor(S * inv_sqrt[:, None] * inv_sqrt[None, :])


def gcn_layer(X: Tensor, adj: Tensor, W: Tensor, activation: str = "identity") -> Tensor:
    n = X.shape[0]
    if adj.shape != (n, n):
        raise DimensionError(f"gcn_layer: adjacency {adj.shape} vs {n} nodes")
    # Â(XW) == (ÂX)W; the right association is cheaper when f > f'
    return ACTIVATIONS[activation](T.matmul(adj, T.matmul(X, W)))


def gat_attention(H: Tensor, mask: np.ndarray, attn: Tensor, slope: float = 0.2) -> Tensor:
    """Row-normalized coefficients alpha[i, j] over j in the (self-looped) neighborhood."""
    f_out = H.shape[1]
    if attn.shape != (2 * f_out,):
        raise DimensionError(f"gat: attention vector {attn.shape} vs 2*{f_out}")
    a_src = T.reshape(T.getitem(attn, slice(0, f_out)), (f_out, 1))
    a_dst = T.reshape(T.getitem(attn, slice(f_out, 2 * f_out)), (f_out, 1))
    n = H.shape[0]
    s_i = T.matmul(H, a_src)                      # [n, 1]
    s_j = T.matmul(H, a_dst)                      # [n, 1]
    ones = Tensor(np.ones((n, 1)))
    logits = T.add(T.matmul(s_i, T.transpose(ones)), T.matmul(ones, T.transpose(s_j)))
    logits = T.mask_fill(T.leaky_relu(logits, slope), mask == 0)
    return T.softmax(logits, axis=1)


def gat_layer(X: Tensor, A, W: Tensor, attn: Tensor, activation: str = "identity") -> Tensor:
    """Single-head GAT; ``A`` is a binary adjacency, self-loops are added here."""
    n = X.shape[0]
    mask = with_self_loops(A)
    if mask.shape != (n, n):
        raise DimensionError(f"gat_layer: adjacency {mask.shape} vs {n} nodes")
    H = T.matmul(X, W)
    alpha = gat_attention(H, mask, attn)
    return ACTIVATIONS[activation](T.matmul(alpha, H))


@dataclass(frozen=True)
class GNNSpec:
    dims: tuple[int, ...]
    kind: str = "gcn"
    hidden_activation: str = "relu"
    final_activation: str = "identity"
    dropout: float = 0.1

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ValueError("GNN needs at least one layer (two dims)")
        if self.kind not in ("gcn", "gat"):
            raise ValueError(f"unknown GNN kind {self.kind!r}")
        for act in (self.hidden_activation, self.final_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")


class GraphContext:
    """Precomputed propagation operators for one graph."""

    def __init__(self, A):
        self.mask = with_self_loops(A)
        self.adj = normalize_adjacency(A)

    @property
    def n(self) -> int:
        return self.mask.shape[0]


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class GNN(Module):
    def __init__(self, spec: GNNSpec, rng: np.random.Generator):
        # Glorot-uniform, as in the original GCN/GAT models
        self.weights = [parameter(_glorot(rng, (a, b))) for a, b in zip(spec.dims[:-1], spec.dims[1:])]
        if spec.kind == "gat":
            self.attn = [parameter(_glorot(rng, (2 * b, 1)).reshape(-1)) for b in spec.dims[1:]]
        self._spec = spec

    @property
    def spec(self) -> GNNSpec:
        return self._spec

    @property
    def out_dim(self) -> int:
        return self._spec.dims[-1]

    def __call__(self, X: Tensor, graph: GraphContext, training: bool = False, rng=None) -> Tensor:
        spec = self._spec
        if X.shape[1] != spec.dims[0]:
            raise DimensionError(f"GNN expects {spec.dims[0]} input features, got {X.shape[1]}")
        h = X
        last = len(self.weights) - 1
        for k, W in enumerate(self.weights):
            act = spec.final_activation if k == last else spec.hidden_activation
            if spec.kind == "gcn":
                h = gcn_layer(h, graph.adj, W, act)
            else:
                H = T.matmul(h, W)
                h = ACTIVATIONS[act](T.matmul(gat_attention(H, graph.mask, self.attn[k]), H))
            if k < last:
                h = dropout(h, spec.dropout, training, rng)
        return h


def gnn_forward(V: Tensor, A, spec: GNNSpec, rng: np.random.Generator | None = None,
                model: GNN | None = None) -> Tensor:
    """Full-graph forward; builds a fresh model from ``spec`` when none is given."""
    model = model if model is not None else GNN(spec, rng if rng is not None else np.random.default_rng(0))
    return model(V, GraphContext(A))


def default_gnn_spec(in_dim: int, out_dim: int = 64, hidden: Sequence[int] = (128,), kind: str = "gcn",
                     final_activation: str = "identity", p_drop: float = 0.1) -> GNNSpec:
    return GNNSpec(dims=(in_dim, *hidden, out_dim), kind=kind, final_activation=final_activation, dropout=p_drop)
