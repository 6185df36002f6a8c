"""The four LM+GNN wirings, the T/N representation banks and the merge strategies.

Bank rows consumed as inputs are detached snapshots; only representations
computed in the current step carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .gnn import GNN, GNNSpec, GraphContext
from .layers import Linear, Module
from .lm import MiniLM, random_gc_vector
from .tensor import DimensionError, Tensor

WIRINGS = ("late_fusion", "early_fusion_gcbert", "compositional", "looped_gcbert", "lm_only", "gnn_only")
MERGERS = ("concat", "add", "max")
VECTORIZERS = ("tfidf", "lm")

_USES_LM = {"late_fusion", "early_fusion_gcbert", "compositional", "looped_gcbert", "lm_only"}
_USES_GNN = {"late_fusion", "early_fusion_gcbert", "compositional", "looped_gcbert", "gnn_only"}


class SpecError(ValueError):
    """Inconsistent architecture specification."""


@dataclass(frozen=True)
class ArchitectureSpec:
    wiring: str = "lm_only"
    merger: str = "concat"
    skip_connection: bool = False
    freeze_gnn: bool = False
    freeze_lm: bool = False
    random_n: bool = False
    gnn_kind: str = "gcn"
    vectorizer: str = "tfidf"

    def validate(self) -> "ArchitectureSpec":
        if self.wiring not in WIRINGS:
            raise SpecError(f"unknown wiring {self.wiring!r}; expected one of {WIRINGS}")
        if self.merger not in MERGERS:
            raise SpecError(f"unknown merger {self.merger!r}; expected one of {MERGERS}")
        if self.gnn_kind not in ("gcn", "gat"):
            raise SpecError(f"unknown gnn_kind {self.gnn_kind!r}")
        if self.vectorizer not in VECTORIZERS:
            raise SpecError(f"unknown vectorizer {self.vectorizer!r}")
        if self.wiring == "looped_gcbert" and (self.freeze_gnn or self.freeze_lm):
            raise SpecError("looped_gcbert requires both the GNN and the LM to be trainable")
        if self.random_n and self.wiring != "early_fusion_gcbert":
            raise SpecError("random_n is only defined for early_fusion_gcbert")
        if self.random_n and self.freeze_gnn:
            raise SpecError("random_n has no GNN to freeze")
        if self.freeze_gnn and self.wiring not in _USES_GNN:
            raise SpecError(f"{self.wiring} has no GNN to freeze")
        if self.freeze_lm and self.wiring not in _USES_LM:
            raise SpecError(f"{self.wiring} has no LM to freeze")
        if self.vectorizer == "lm" and (self.freeze_gnn or self.wiring not in ("late_fusion", "early_fusion_gcbert")):
            raise SpecError("LM-derived features are only available to late/early fusion with a trainable GNN")
        if self.freeze_gnn and self.freeze_lm and self.wiring != "late_fusion":
            raise SpecError("freezing both components leaves only the classifier; use late_fusion")
        return self

    @property
    def uses_lm(self) -> bool:
        return self.wiring in _USES_LM

    @property
    def uses_gnn(self) -> bool:
        return self.wiring in _USES_GNN and not self.random_n

    @property
    def merges(self) -> bool:
        return self.wiring == "late_fusion" or (self.skip_connection and self.wiring not in ("lm_only", "gnn_only"))

    @property
    def label(self) -> str:
        """Human-readable variant name in the style of the results table."""
        if self.wiring == "gnn_only":
            return self.gnn_kind.upper()
        if self.wiring == "lm_only":
            return "LM"
        if self.wiring == "late_fusion":
            return f"Late fusion ({self.merger})"
        if self.wiring == "compositional":
            base = "GNN(LM)"
        elif self.wiring == "looped_gcbert":
            base = "Looped GCBERT"
        else:
            base = "GCBERT"
            if self.random_n:
                base += " with random N (not trained)"
            elif self.freeze_gnn:
                base += " with frozen GNN"
        if self.freeze_lm:
            base += " with frozen LM"
        if self.skip_connection:
            base += f" + skip conn ({self.merger})"
        return base

    @property
    def slug(self) -> str:
        parts = [self.wiring]
        if self.wiring == "gnn_only" or self.gnn_kind != "gcn":
            parts.append(self.gnn_kind)
        if self.wiring == "late_fusion" or self.skip_connection:
            parts.append(("skip-" if self.skip_connection else "") + self.merger)
        for flag in ("freeze_gnn", "freeze_lm", "random_n"):
            if getattr(self, flag):
                parts.append(flag.replace("_", "-"))
        if self.vectorizer != "tfidf":
            parts.append(f"v-{self.vectorizer}")
        return "_".join(parts)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def table_variants() -> list[ArchitectureSpec]:
    """Every row of the results table: three baselines and thirteen fusion variants."""
    A = ArchitectureSpec
    return [
        A("gnn_only", gnn_kind="gat"),
        A("gnn_only", gnn_kind="gcn"),
        A("lm_only"),
        A("compositional"),
        A("looped_gcbert"),
        A("early_fusion_gcbert", merger="concat", skip_connection=True),
        A("early_fusion_gcbert", random_n=True),
        A("early_fusion_gcbert", merger="add", skip_connection=True),
        A("early_fusion_gcbert", merger="add", skip_connection=True, freeze_gnn=True),
        A("late_fusion", merger="add"),
        A("early_fusion_gcbert"),
        A("looped_gcbert", merger="concat", skip_connection=True),
        A("early_fusion_gcbert", freeze_gnn=True),
        A("late_fusion", merger="concat"),
        A("looped_gcbert", merger="add", skip_connection=True),
        A("early_fusion_gcbert", merger="concat", skip_connection=True, freeze_gnn=True),
    ]


def merge(t: Tensor, n: Tensor, strategy: str) -> Tensor:
    """Combine text and node representations along the feature axis."""
    if strategy == "concat":
        return T.concat([t, n], axis=-1)
    if t.shape != n.shape:
        raise DimensionError(f"merge({strategy}): shapes {t.shape} and {n.shape} differ")
    if strategy == "add":
        return T.add(t, n)
    if strategy == "max":
        return T.maximum(t, n)
    raise ValueError(f"unknown merge strategy {strategy!r}")


@dataclass
class RepresentationBank:
    T: np.ndarray
    N: np.ndarray
    V: np.ndarray
    initialized: dict[str, bool] = field(default_factory=lambda: {"T": False, "N": False, "V": False})

    def copy(self) -> "RepresentationBank":
        return RepresentationBank(self.T.copy(), self.N.copy(), self.V.copy(), dict(self.initialized))


@dataclass
class PreparedGraph:
    """Model-ready view of a document graph."""

    sequences: list[list[int]]
    features: np.ndarray            # static vectorized texts (TF-IDF)
    graph: GraphContext
    labels: np.ndarray
    num_classes: int

    @property
    def n(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    ff: int = 256
    max_len: int = 128
    lm_dropout: float = 0.1
    gnn_hidden: tuple[int, ...] = (128,)
    gnn_dropout: float = 0.1


class Classifier(Module):
    def __init__(self, n_in: int, num_classes: int, rng: np.random.Generator):
        self.out = Linear(n_in, num_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(x)


class FusionModel:
    """LM, GNN and classifier wired according to an ``ArchitectureSpec``.

    ``step`` runs one training forward on a batch and writes the fresh
    representations back into the bank; ``predict`` is a side-effect-free
    evaluation forward.
    """

    def __init__(
        self,
        spec: ArchitectureSpec,
        data: PreparedGraph,
        vocab_size: int,
        config: ModelConfig = ModelConfig(),
        rng: np.random.Generator | None = None,
        lm: MiniLM | None = None,
        gnn: GNN | None = None,
        inject_gc: bool = True,
    ):
        self.spec = spec.validate()
        self.data = data
        self.config = config
        self.inject_gc = inject_gc
        rng = rng if rng is not None else np.random.default_rng(0)
        d = config.d
        self.lm = None
        self.gnn = None
        if spec.uses_lm:
            self.lm = lm if lm is not None else MiniLM(
                vocab_size, d, config.layers, config.heads, config.ff, config.max_len, config.lm_dropout, rng)
        if spec.uses_gnn:
            self.gnn = gnn if gnn is not None else GNN(self.gnn_spec(spec, data, config), rng)
            if self.gnn.out_dim != d:
                raise DimensionError(f"GNN output {self.gnn.out_dim} must equal LM dimension {d}")
        width = 2 * d if spec.merges and spec.merger == "concat" else d
        self.classifier = Classifier(width, data.num_classes, rng)
        self.bank: RepresentationBank | None = None
        self._random_n_rng = np.random.default_rng(rng.integers(2**63))

    @staticmethod
    def gnn_spec(spec: ArchitectureSpec, data: PreparedGraph, config: ModelConfig) -> GNNSpec:
        if spec.wiring in ("compositional", "looped_gcbert") or spec.vectorizer == "lm":
            in_dim = config.d
        else:
            in_dim = data.features.shape[1]
        # the [GC] slot needs values centred like token embeddings
        final = "tanh" if spec.wiring in ("early_fusion_gcbert", "looped_gcbert") else "identity"
        return GNNSpec(dims=(in_dim, *config.gnn_hidden, config.d), kind=spec.gnn_kind,
                       final_activation=final, dropout=config.gnn_dropout)

    # -- parameter groups ------------------------------------------------
    def modules(self) -> list[Module]:
        return [m for m in (self.lm, self.gnn, self.classifier) if m is not None]

    def lm_parameters(self) -> list[Tensor]:
        return self.lm.parameters() if self.lm is not None else []

    def other_parameters(self) -> list[Tensor]:
        out = self.gnn.parameters() if self.gnn is not None else []
        return out + self.classifier.parameters()

    def parameters(self) -> list[Tensor]:
        return self.lm_parameters() + self.other_parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        for p, arr in zip(self.parameters(), state):
            p.data[...] = arr

    # -- building blocks -------------------------------------------------
    def _encode(self, idx: Sequence[int], gc: Tensor | None, training: bool, rng) -> Tensor:
        seqs = [self.data.sequences[i] for i in idx]
        return self.lm.encode_batch(seqs, gc if self.inject_gc else None, training, rng)

    def _encode_all(self, gc_rows: np.ndarray | None = None, chunk: int = 64) -> np.ndarray:
        out = np.zeros((self.data.n, self.config.d))
        with T.no_grad():
            for s in range(0, self.data.n, chunk):
                idx = list(range(s, min(s + chunk, self.data.n)))
                gc = None if gc_rows is None else Tensor(gc_rows[idx])
                out[idx] = self._encode(idx, gc, False, None).data
        return out

    def _gnn(self, X, training: bool, rng) -> Tensor:
        return self.gnn(T.as_tensor(X), self.data.graph, training, rng)

    def _gnn_input(self) -> np.ndarray:
        return self.bank.V

    # -- banks -----------------------------------------------------------
    def initialize_banks(self) -> RepresentationBank:
        n, d = self.data.n, self.config.d
        spec = self.spec
        bank = RepresentationBank(np.zeros((n, d)), np.zeros((n, d)), self.data.features)
        if self.lm is not None:
            bank.T = self._encode_all()
            bank.initialized["T"] = True
        if spec.vectorizer == "lm" and spec.wiring in ("late_fusion", "early_fusion_gcbert", "gnn_only"):
            bank.V = bank.T.copy() if self.lm is not None else bank.V
        bank.initialized["V"] = True
        self.bank = bank
        if spec.random_n:
            bank.N = np.stack([random_gc_vector(d, self._random_n_rng).data for _ in range(n)])
            bank.initialized["N"] = True
        elif self.gnn is not None:
            src = bank.T if spec.wiring in ("compositional", "looped_gcbert") else bank.V
            with T.no_grad():
                bank.N = self._gnn(src, False, None).data.copy()
            bank.initialized["N"] = True
        return bank

    # -- one training forward ------------------------------------------------
    def step(self, batch: Sequence[int], training: bool = True, rng=None) -> Tensor:
        if self.bank is None:
            raise RuntimeError("initialize_banks() must run before step()")
        idx = np.asarray(batch, dtype=np.int64)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= self.data.n:
            raise IndexError(f"batch indices must lie in [0, {self.data.n})")
        x, t, nrep = self._forward(idx, training, rng, self.bank.T, self.bank.N, fresh_all=False)
        if t is not None:
            self.bank.T[idx] = t.data
        if nrep is not None and not self.spec.random_n:
            self.bank.N[idx] = nrep.data
        return self.classifier(x)

    def _forward(self, idx, training, rng, T_bank, N_bank, fresh_all):
        spec = self.spec
        w = spec.wiring
        t = nrep = None
        if w == "lm_only":
            t = self._encode(idx, None, training, rng)
            return t, t, None
        if w == "gnn_only":
            nrep = T.take_rows(self._gnn(self._gnn_input(), training, rng), idx)
            return nrep, None, nrep
        if w == "late_fusion":
            t = self._encode(idx, None, training, rng)
            nrep = T.take_rows(self._gnn(self._gnn_input(), training, rng), idx)
            return merge(t, nrep, spec.merger), t, nrep
        if w == "early_fusion_gcbert":
            if spec.random_n:
                nrep = Tensor(N_bank[idx])
            else:
                nrep = T.take_rows(self._gnn(self._gnn_input(), training, rng), idx)
            t = self._encode(idx, nrep, training, rng)
            return (merge(t, nrep, spec.merger) if spec.skip_connection else t), t, nrep
        # compositional / looped: the GNN sees the whole T matrix
        gc = Tensor(N_bank[idx]) if w == "looped_gcbert" else None
        if fresh_all:
            full = Tensor(T_bank)
            t = Tensor(T_bank[idx])
        else:
            t = self._encode(idx, gc, training, rng)
            full = T.scatter_rows(T_bank, idx, t)
        nrep = T.take_rows(self._gnn(full, training, rng), idx)
        return (merge(t, nrep, spec.merger) if spec.skip_connection else nrep), t, nrep

    # -- evaluation --------------------------------------------------------
    def predict(self, indices: Sequence[int]) -> np.ndarray:
        """Logits for ``indices`` without touching the bank or building a graph."""
        idx = np.asarray(indices, dtype=np.int64)
        with T.no_grad():
            if self.spec.wiring in ("compositional", "looped_gcbert"):
                gc_rows = self.bank.N if self.spec.wiring == "looped_gcbert" else None
                T_all = self._encode_all(gc_rows)
                x, _, _ = self._forward(idx, False, None, T_all, self.bank.N, fresh_all=True)
                return self.classifier(x).data
            out = []
            for s in range(0, len(idx), 64):
                x, _, _ = self._forward(idx[s:s + 64], False, None, self.bank.T, self.bank.N, fresh_all=False)
                out.append(self.classifier(x).data)
            return np.concatenate(out, axis=0) if out else np.zeros((0, self.data.num_classes))
