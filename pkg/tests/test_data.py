import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gclm.data import (
    CorpusError,
    Document,
    DocumentGraph,
    IntegrityError,
    SyntheticConfig,
    generate_synthetic,
    load_corpus,
    make_split,
    tfidf_vectorize,
    write_corpus,
)
from gclm.lm import words


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


HEADER = json.dumps({"format": "gclm-corpus", "version": 1, "label_map": {"x": 0, "y": 1}})


def test_load_three_document_chain(tmp_path):
    path = _write_lines(tmp_path / "c.jsonl", [
        HEADER,
        json.dumps({"id": "a", "text": "one", "label": "x", "refs": ["b"]}),
        json.dumps({"id": "b", "text": "two", "label": "y", "refs": ["c"]}),
        json.dumps({"id": "c", "text": "three", "label": 0, "refs": []}),
    ])
    g = load_corpus(path)
    assert g.n == 3 and g.num_classes == 2
    A = g.adjacency
    assert int(A.sum()) == 2 and A[0, 1] == 1 and A[1, 2] == 1
    assert list(g.labels) == [0, 1, 0]


def test_unknown_reference_is_integrity_error(tmp_path):
    path = _write_lines(tmp_path / "c.jsonl", [
        HEADER,
        json.dumps({"id": "a", "text": "t", "label": "x", "refs": ["ghost"]}),
    ])
    with pytest.raises(IntegrityError, match="ghost"):
        load_corpus(path)


def test_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(CorpusError, match="empty corpus"):
        load_corpus(path)
    with pytest.raises(CorpusError, match="empty corpus"):
        load_corpus(_write_lines(tmp_path / "hdr.jsonl", [HEADER]))


def test_malformed_record_reports_line_number(tmp_path):
    path = _write_lines(tmp_path / "bad.jsonl", [
        HEADER,
        json.dumps({"id": "a", "text": "t", "label": "x"}),
        "{not json",
    ])
    with pytest.raises(CorpusError, match=r":3:"):
        load_corpus(path)
    path = _write_lines(tmp_path / "lab.jsonl", [HEADER, json.dumps({"id": "a", "text": "t", "label": "zz"})])
    with pytest.raises(CorpusError, match="unknown label"):
        load_corpus(path)
    path = _write_lines(tmp_path / "dup.jsonl", [
        HEADER,
        json.dumps({"id": "a", "text": "t", "label": "x"}),
        json.dumps({"id": "a", "text": "u", "label": "y"}),
    ])
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(path)


def test_graph_invariants():
    docs = [Document("a", "", 0), Document("b", "", 1)]
    with pytest.raises(CorpusError):
        DocumentGraph(docs, [(0, 0)], 2)
    with pytest.raises(IntegrityError):
        DocumentGraph(docs, [(0, 5)], 2)
    with pytest.raises(CorpusError):
        DocumentGraph([Document("a", "", 3)], [], 2)


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_corpus_round_trip(tmp_path_factory, data):
    n = data.draw(st.integers(1, 8))
    c = data.draw(st.integers(1, 4))
    text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=20)
    docs = [Document(f"id{i}", data.draw(text), data.draw(st.integers(0, c - 1))) for i in range(n)]
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1])
    edges = sorted(set(data.draw(st.lists(pairs, max_size=12)))) if n > 1 else []
    g = DocumentGraph(docs, edges, c, [f"L{k}" for k in range(c)])
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    write_corpus(g, path)
    assert load_corpus(path) == g


def test_tfidf_two_document_example():
    X = tfidf_vectorize(["a b", "a c"], vocab_cap=None)
    # hand computation: idf(a) = 1, idf(b) = idf(c) = ln(1.5) + 1
    idf_b = math.log(3 / 2) + 1
    norm = math.sqrt(1 + idf_b ** 2)
    np.testing.assert_allclose(X[0], [1 / norm, idf_b / norm, 0.0], atol=1e-12)
    np.testing.assert_allclose(X[0], [0.5797, 0.8148, 0.0], atol=5e-5)


def test_tfidf_single_document_and_empty_rows():
    X = tfidf_vectorize(["alpha beta beta"])
    np.testing.assert_allclose(X[0], np.array([1.0, 2.0]) / math.sqrt(5), atol=1e-12)
    Y = tfidf_vectorize(["alpha", "zzz"], fit_indices=[0])
    assert not Y[1].any()


def test_tfidf_vocab_cap_uses_document_frequency_and_train_only():
    docs = ["common rare1", "common rare2", "common other", "testonly"]
    X = tfidf_vectorize(docs, vocab_cap=1, fit_indices=[0, 1, 2])
    assert X.shape == (4, 1)
    assert not X[3].any()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.text(alphabet="abc ", max_size=15), min_size=1, max_size=8))
def test_tfidf_rows_unit_or_zero(docs):
    X = tfidf_vectorize(docs)
    norms = np.linalg.norm(X, axis=1)
    for norm, d in zip(norms, docs):
        assert abs(norm - (1.0 if words(d) else 0.0)) < 1e-12


def test_split_sizes_and_determinism():
    s = make_split(10, 3)
    assert (len(s.train), len(s.validation), len(s.test)) == (7, 1, 2)
    assert make_split(10, 3) == s
    with pytest.raises(ValueError):
        make_split(9, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 500), st.integers(0, 2**31))
def test_split_is_exact_partition(n, seed):
    s = make_split(n, seed)
    parts = [set(s.train), set(s.validation), set(s.test)]
    assert sum(map(len, parts)) == n
    assert set().union(*parts) == set(range(n))
    assert abs(len(s.test) - 0.2 * n) <= 0.5 and abs(len(s.validation) - 0.1 * n) <= 0.5


def test_test_coverage_over_ten_seeds():
    covered = set()
    for seed in range(10):
        covered.update(make_split(1000, seed).test)
    # a fixed index is missed by all ten splits with probability 0.8**10, about 0.1
    assert len(covered) > 850


def test_default_synthetic_corpus():
    g = generate_synthetic()
    assert g.n == 600 and g.num_classes == 3
    assert 0.80 <= g.homophily() <= 0.90


def test_synthetic_homophily_control():
    g = generate_synthetic(n=300, homophily=0.9)
    assert 0.85 <= g.homophily() <= 0.95
    assert generate_synthetic(n=200, homophily=1.0).homophily() == 1.0


def test_synthetic_determinism(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(generate_synthetic(n=100, seed=5), a)
    write_corpus(generate_synthetic(n=100, seed=5), b)
    assert a.read_bytes() == b.read_bytes()
    write_corpus(generate_synthetic(n=100, seed=6), b)
    assert a.read_bytes() != b.read_bytes()


def test_synthetic_rejects_bad_parameters():
    with pytest.raises(ValueError):
        generate_synthetic(n=0)
    with pytest.raises(ValueError):
        generate_synthetic(homophily=1.5)
    with pytest.raises(ValueError):
        SyntheticConfig(num_classes=1).validate()


def _naive_bayes_accuracy(g, split):
    # multinomial naive Bayes with add-one smoothing, an independent text-only oracle
    c = g.num_classes
    y = g.labels
    vocab = sorted({w for i in split.train for w in words(g.texts[i])})
    index = {w: k for k, w in enumerate(vocab)}
    counts = np.ones((c, len(vocab)))
    for i in split.train:
        for w in words(g.texts[i]):
            counts[y[i], index[w]] += 1
    logp = np.log(counts / counts.sum(axis=1, keepdims=True))
    prior = np.log(np.bincount([y[i] for i in split.train], minlength=c) + 1.0)
    hits = 0
    for i in split.test:
        ids = [index[w] for w in words(g.texts[i]) if w in index]
        hits += int(np.argmax(prior + logp[:, ids].sum(axis=1)) == y[i])
    return hits / len(split.test)


def test_pure_text_signal_is_linearly_recoverable():
    g = generate_synthetic(text_signal=1.0, graph_signal=0.0)
    assert _naive_bayes_accuracy(g, make_split(g.n, 0)) > 0.95


def test_graph_only_documents_defeat_text_oracle():
    g = generate_synthetic(text_signal=1.0, graph_signal=1.0)
    assert _naive_bayes_accuracy(g, make_split(g.n, 0)) < 0.95


@pytest.mark.parametrize("text", ["a\x85b", "x y", "p q", "f\x0cg", "\x1c"])
def test_corpus_round_trip_unicode_line_breaks(tmp_path, text):
    g = DocumentGraph([Document("d0", text, 0), Document("d1", "plain", 1)], [(0, 1)], 2, ["A", "B"])
    write_corpus(g, tmp_path / "c.jsonl")
    assert load_corpus(tmp_path / "c.jsonl") == g
