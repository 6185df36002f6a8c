"""Word-level mini language model with graph-context ([GC]) token injection."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .layers import Embedding, LayerNorm, Module, TransformerBlock, dropout
from .tensor import DimensionError, Tensor

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
_VOCAB_HEADER = "#gclm-vocab v1"
_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocabulary:
    token_to_id: dict[str, int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(RESERVED) + len(self.token_to_id)

    def __len__(self) -> int:
        return self.size

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocabulary":
        """Most frequent words first, ties broken alphabetically."""
        counts = Counter(w for t in texts for w in words(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(RESERVED))]
        return cls({w: i + len(RESERVED) for i, w in enumerate(ranked)})

    def save(self, path: str | Path) -> None:
        ordered = sorted(self.token_to_id, key=self.token_to_id.get)
        lines = [f"{_VOCAB_HEADER} {' '.join(RESERVED)}"] + ordered
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(_VOCAB_HEADER):
            raise ValueError(f"{path}: missing vocabulary header")
        return cls({w: i + len(RESERVED) for i, w in enumerate(lines[1:])})


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """[CLS] body [SEP]; body truncated to max_len - 2 ids."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    body = [vocab.token_to_id.get(w, UNK) for w in words(text)][: max_len - 2]
    return [CLS, *body, SEP]


def random_gc_vector(d: int, rng: np.random.Generator) -> Tensor:
    if d <= 0:
        raise ValueError("d must be positive")
    return Tensor(rng.standard_normal(d))


def _fit_for_gc(ids: Sequence[int], max_len: int) -> list[int]:
    # drop trailing body tokens so the [GC] slot always fits; [SEP] is kept
    ids = list(ids)
    while len(ids) + 1 > max_len and len(ids) > 2:
        del ids[-2]
    return ids


def inject_gc_token(
    tokens: Tensor,
    gc_vector: Tensor,
    positional: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
) -> Tensor:
    """Insert a graph-context vector after [CLS] and layer-normalize each row.

    ``tokens`` holds raw token embeddings [L, d] (no positions yet). The result
    is [L+1, d]: row 0 is [CLS] + pos[0], row 1 is gc + pos[1], and body row k
    moves to k+1 with pos[k+1].
    """
    L, d = tokens.shape
    if gc_vector.shape != (d,):
        raise DimensionError(f"gc vector shape {gc_vector.shape} does not match model dimension {d}")
    if L + 1 > positional.shape[0]:
        keep = [0] + list(range(1, L))
        while len(keep) + 1 > positional.shape[0]:
            del keep[-2]
        tokens = T.take_rows(tokens, keep)
        L = len(keep)
    gamma = gamma if gamma is not None else Tensor(np.ones(d))
    beta = beta if beta is not None else Tensor(np.zeros(d))
    seq = T.concat([T.getitem(tokens, slice(0, 1)), T.reshape(gc_vector, (1, d)),
                    T.getitem(tokens, slice(1, L))], axis=0)
    seq = T.add_broadcast(seq, T.getitem(positional, slice(0, L + 1)))
    return T.layer_norm(seq, gamma, beta)


class MiniLM(Module):
    """Transformer encoder whose document representation is the final [CLS] state."""

    def __init__(
        self,
        vocab_size: int,
        d: int = 64,
        layers: int = 4,
        heads: int = 4,
        ff: int = 256,
        max_len: int = 128,
        p_drop: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embedding = Embedding(vocab_size, d, max_len, rng)
        self.embed_norm = LayerNorm(d)
        self.blocks = [TransformerBlock(d, heads, ff, rng, p_drop) for _ in range(layers)]
        self._d = d
        self._max_len = max_len
        self._p = p_drop
        self._vocab_size = vocab_size

    @property
    def d(self) -> int:
        return self._d

    @property
    def max_len(self) -> int:
        return self._max_len

    def embed(self, batch: Sequence[Sequence[int]], gc: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
        """Token + position embeddings for a padded batch, with optional [GC] at slot 1.

        Returns the normalized [B, L, d] input and a [B, L] keep-mask.
        """
        b = len(batch)
        if gc is not None:
            if gc.shape != (b, self._d):
                raise DimensionError(f"gc batch shape {gc.shape} does not match ({b}, {self._d})")
            batch = [_fit_for_gc(s, self._max_len) for s in batch]
        lengths = np.array([len(s) for s in batch])
        if lengths.max() > self._max_len:
            raise ValueError(f"sequence length {lengths.max()} exceeds max_len {self._max_len}")
        L = int(lengths.max())
        ids = np.full((b, L), PAD, dtype=np.int64)
        for r, s in enumerate(batch):
            ids[r, : len(s)] = s
        if ids.max() >= self._vocab_size:
            raise IndexError("token id outside vocabulary")
        tok = self.embedding.lookup(ids)
        if gc is not None:
            tok = T.concat([T.getitem(tok, (slice(None), slice(0, 1))),
                            T.reshape(gc, (b, 1, self._d)),
                            T.getitem(tok, (slice(None), slice(1, L)))], axis=1)
            lengths = lengths + 1
            L += 1
        x = T.add_broadcast(tok, T.getitem(self.embedding.positional, slice(0, L)))
        mask = np.arange(L)[None, :] < lengths[:, None]
        return self.embed_norm(x), mask

    def encode_batch(
        self,
        batch: Sequence[Sequence[int]],
        gc: Tensor | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        x, mask = self.embed(batch, gc)
        x = dropout(x, self._p, training, rng)
        for block in self.blocks:
            x = block(x, mask, training, rng)
        return T.getitem(x, (slice(None), 0))

    def encode(self, seq: Sequence[int], gc_vector: Tensor | None = None) -> Tensor:
        if gc_vector is not None and gc_vector.shape != (self._d,):
            raise DimensionError(f"gc vector shape {gc_vector.shape} does not match ({self._d},)")
        gc = None if gc_vector is None else T.reshape(gc_vector, (1, self._d))
        return T.reshape(self.encode_batch([seq], gc), (self._d,))
