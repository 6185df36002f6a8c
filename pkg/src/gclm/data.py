"""Document graphs: corpus files, TF-IDF features, seeded splits, synthetic corpora."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import words

CORPUS_FORMAT = "gclm-corpus"
# share of documents whose text carries no class words, at graph_signal = 1
GRAPH_ONLY_SHARE = 0.2


class CorpusError(ValueError):
    """Malformed corpus file."""


class IntegrityError(CorpusError):
    """Edge references a document that does not exist."""


@dataclass
class Document:
    id: str
    text: str
    label: int


@dataclass
class DocumentGraph:
    documents: list[Document]
    edges: list[tuple[int, int]]
    num_classes: int
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.documents)
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise IntegrityError(f"edge ({i}, {j}) outside [0, {n})")
            if i == j:
                raise CorpusError(f"self-edge on document {self.documents[i].id!r}")
        for d in self.documents:
            if not 0 <= d.label < self.num_classes:
                raise CorpusError(f"label {d.label} of {d.id!r} outside [0, {self.num_classes})")
        if not self.label_names:
            self.label_names = [str(k) for k in range(self.num_classes)]

    @property
    def n(self) -> int:
        return len(self.documents)

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self.documents]

    @property
    def labels(self) -> np.ndarray:
        return np.array([d.label for d in self.documents], dtype=np.int64)

    @property
    def adjacency(self) -> np.ndarray:
        """Directed binary matrix: A[i, j] = 1 iff document i cites document j."""
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = 1.0
        return A

    def homophily(self) -> float:
        if not self.edges:
            return float("nan")
        y = self.labels
        return float(np.mean([y[i] == y[j] for i, j in self.edges]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DocumentGraph):
            return NotImplemented
        return (self.documents == other.documents and sorted(self.edges) == sorted(other.edges)
                and self.num_classes == other.num_classes and self.label_names == other.label_names)


def write_corpus(graph: DocumentGraph, path: str | Path) -> None:
    """One JSON header line with the label map, then one JSON record per document."""
    refs: dict[int, list[str]] = {i: [] for i in range(graph.n)}
    for i, j in graph.edges:
        refs[i].append(graph.documents[j].id)
    lines = [json.dumps({"format": CORPUS_FORMAT, "version": 1,
                         "label_map": {name: k for k, name in enumerate(graph.label_names)}},
                        sort_keys=True, ensure_ascii=False)]
    for i, d in enumerate(graph.documents):
        lines.append(json.dumps({"id": d.id, "text": d.text, "label": graph.label_names[d.label],
                                 "refs": refs[i]}, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> DocumentGraph:
    # split on newlines only: splitlines() would also break on U+0085/U+2028 inside texts
    raw = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n").split("\n")
    lines = [(k, ln) for k, ln in enumerate(raw, 1) if ln.strip()]
    if not lines:
        raise CorpusError(f"{path}: empty corpus")
    first_no, first = lines[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:{first_no}: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or "label_map" not in header:
        raise CorpusError(f"{path}:{first_no}: header must carry a label_map")
    label_map = {str(k): int(v) for k, v in header["label_map"].items()}
    num_classes = len(label_map)
    names = [""] * num_classes
    for name, k in label_map.items():
        if not 0 <= k < num_classes:
            raise CorpusError(f"{path}:{first_no}: label index {k} out of range")
        names[k] = name

    docs: list[Document] = []
    raw_refs: list[tuple[int, list[str]]] = []
    index: dict[str, int] = {}
    for line_no, line in lines[1:]:
        try:
            rec = json.loads(line)
            doc_id, text, label, refs = str(rec["id"]), rec["text"], rec["label"], rec.get("refs", [])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}:{line_no}: malformed record ({exc})") from None
        if not isinstance(text, str) or not isinstance(refs, list):
            raise CorpusError(f"{path}:{line_no}: malformed record (text/refs types)")
        if isinstance(label, str) and label in label_map:
            k = label_map[label]
        elif isinstance(label, int) and not isinstance(label, bool) and 0 <= label < num_classes:
            k = label
        else:
            raise CorpusError(f"{path}:{line_no}: unknown label {label!r}")
        if doc_id in index:
            raise CorpusError(f"{path}:{line_no}: duplicate id {doc_id!r}")
        index[doc_id] = len(docs)
        docs.append(Document(doc_id, text, k))
        raw_refs.append((line_no, [str(r) for r in refs]))
    if not docs:
        raise CorpusError(f"{path}: empty corpus")

    edges: set[tuple[int, int]] = set()
    for i, (line_no, refs) in enumerate(raw_refs):
        for r in refs:
            if r not in index:
                raise IntegrityError(f"{path}:{line_no}: document {docs[i].id!r} cites unknown id {r!r}")
            j = index[r]
            if j != i:
                edges.add((i, j))
    return DocumentGraph(docs, sorted(edges), num_classes, names)


class TfidfVectorizer:
    """Raw counts times smoothed idf = ln((1+n)/(1+df)) + 1, rows L2-normalized."""

    def __init__(self, vocab_cap: int | None = None):
        self.vocab_cap = vocab_cap
        self.vocabulary: dict[str, int] = {}
        self.idf = np.zeros(0)

    def fit(self, docs: Sequence[str]) -> "TfidfVectorizer":
        if not docs:
            raise ValueError("TF-IDF needs at least one document")
        df = Counter(w for d in docs for w in set(words(d)))
        terms = sorted(df, key=lambda w: (-df[w], w))
        if self.vocab_cap is not None:
            terms = terms[: self.vocab_cap]
        terms.sort()
        self.vocabulary = {w: k for k, w in enumerate(terms)}
        n = len(docs)
        self.idf = np.array([math.log((1 + n) / (1 + df[w])) + 1.0 for w in terms])
        return self

    def transform(self, docs: Sequence[str]) -> np.ndarray:
        X = np.zeros((len(docs), len(self.vocabulary)))
        for r, d in enumerate(docs):
            for w, c in Counter(words(d)).items():
                k = self.vocabulary.get(w)
                if k is not None:
                    X[r, k] = c
        X *= self.idf
        norms = np.linalg.norm(X, axis=1)
        nz = norms > 0
        X[nz] /= norms[nz, None]
        return X


def tfidf_vectorize(docs: Sequence[str], vocab_cap: int | None = None,
                    fit_indices: Sequence[int] | None = None) -> np.ndarray:
    """TF-IDF rows for every document; vocabulary and idf come from ``fit_indices``."""
    fit_docs = list(docs) if fit_indices is None else [docs[i] for i in fit_indices]
    return TfidfVectorizer(vocab_cap).fit(fit_docs).transform(docs)


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    seed: int


def make_split(n: int, seed: int) -> Split:
    """Seeded shuffle, then 70/10/20; train absorbs the rounding remainder."""
    if n < 10:
        raise ValueError(f"need at least 10 documents to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(0.1 * n))
    n_test = int(round(0.2 * n))
    n_train = n - n_val - n_test
    return Split(tuple(int(i) for i in perm[:n_train]),
                 tuple(int(i) for i in perm[n_train:n_train + n_val]),
                 tuple(int(i) for i in perm[n_train + n_val:]),
                 seed)


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 600
    num_classes: int = 3
    homophily: float = 0.85
    text_signal: float = 0.7
    graph_signal: float = 0.5
    vocab_size: int = 2000
    class_vocab_fraction: float = 0.3
    out_degree: int = 2
    min_words: int = 8
    max_words: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        for name in ("homophily", "text_signal", "graph_signal", "class_vocab_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.out_degree < 0 or not 1 <= self.min_words <= self.max_words:
            raise ValueError("out_degree >= 0 and 1 <= min_words <= max_words required")
        per_class = int(self.vocab_size * self.class_vocab_fraction) // self.num_classes
        if per_class < 1 or self.vocab_size - per_class * self.num_classes < 1:
            raise ValueError("vocabulary too small for the class/background split")


_SYLLABLES = ["ba", "ko", "ri", "te", "mu", "sa", "lo", "ne", "vi", "du", "fa", "ze", "pi", "go", "hu", "jy"]


def _pseudo_word(k: int) -> str:
    out = []
    while True:
        out.append(_SYLLABLES[k % len(_SYLLABLES)])
        k //= len(_SYLLABLES)
        if k == 0:
            break
    return "".join(out)


def _zipf(m: int) -> np.ndarray:
    p = 1.0 / np.arange(1, m + 1)
    return p / p.sum()


def generate_synthetic(cfg: SyntheticConfig | None = None, **overrides) -> DocumentGraph:
    """Citation graph whose labels are partly recoverable only through neighbors.

    Labels are uniform. A share ``1 - homophily`` of documents are "bridges"
    that cite documents of one other class only; the rest cite same-class
    non-bridges. Each word of an ordinary document comes from its class
    vocabulary with probability ``text_signal``, else from shared background
    vocabulary. A share ``GRAPH_ONLY_SHARE * graph_signal`` of documents have
    background-only text, so their label is visible only through citations.
    """
    cfg = cfg if cfg is not None else SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, c = cfg.n, cfg.num_classes
    y = rng.integers(0, c, size=n)
    bridge = rng.random(n) < (1.0 - cfg.homophily)
    bridge_to = (y + rng.integers(1, c, size=n)) % c
    graph_only = rng.random(n) < GRAPH_ONLY_SHARE * cfg.graph_signal

    edges: set[tuple[int, int]] = set()
    for i in range(n):
        if bridge[i]:
            pool = np.flatnonzero(y == bridge_to[i])
        else:
            pool = np.flatnonzero((y == y[i]) & ~bridge)
            if pool.size <= 1:
                pool = np.flatnonzero(y == y[i])
        pool = pool[pool != i]
        if pool.size == 0:
            continue
        targets = rng.choice(pool, size=min(cfg.out_degree, pool.size), replace=False)
        edges.update((i, int(j)) for j in targets)

    per_class = int(cfg.vocab_size * cfg.class_vocab_fraction) // c
    n_background = cfg.vocab_size - per_class * c
    lexicon = [_pseudo_word(k) for k in range(cfg.vocab_size)]
    class_words = [lexicon[k * per_class:(k + 1) * per_class] for k in range(c)]
    background = lexicon[per_class * c:]
    p_class, p_back = _zipf(per_class), _zipf(n_background)

    docs = []
    width = len(str(n - 1))
    for i in range(n):
        length = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        from_class = (rng.random(length) < cfg.text_signal) & (not graph_only[i])
        cls_draw = rng.choice(per_class, size=length, p=p_class)
        back_draw = rng.choice(n_background, size=length, p=p_back)
        text = " ".join(class_words[y[i]][cls_draw[k]] if from_class[k] else background[back_draw[k]]
                        for k in range(length))
        docs.append(Document(f"doc{i:0{width}d}", text, int(y[i])))
    return DocumentGraph(docs, sorted(edges), c, [f"class{k}" for k in range(c)])
