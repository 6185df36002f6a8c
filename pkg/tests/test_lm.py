import numpy as np
import pytest

from gclm import tensor as T
from gclm.data import make_split
from gclm.lm import (
    CLS,
    SEP,
    UNK,
    MiniLM,
    Vocabulary,
    inject_gc_token,
    random_gc_vector,
    tokenize,
)
from gclm.tensor import DimensionError, Tensor, finite_diff_check


def _ln_rows(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def test_tokenize_examples():
    vocab = Vocabulary({"hello": 4, "world": 5})
    assert tokenize("Hello world", vocab, 128) == [2, 4, 5, 3]
    assert tokenize("xyzzy", vocab, 128) == [CLS, UNK, SEP]
    assert tokenize("", vocab, 128) == [CLS, SEP]
    long_text = " ".join(["hello"] * 500)
    seq = tokenize(long_text, vocab, 128)
    assert len(seq) == 128 and seq[0] == CLS and seq[-1] == SEP


def test_tokenize_splits_on_non_alphanumerics():
    vocab = Vocabulary({"graph": 4, "2": 5, "node": 6})
    assert tokenize("Graph-2,NODE!", vocab, 10) == [CLS, 4, 5, 6, SEP]


def test_vocabulary_reserved_ids_and_order():
    vocab = Vocabulary.build(["b a a", "c b a"])
    assert vocab.token_to_id == {"a": 4, "b": 5, "c": 6}
    assert min(vocab.token_to_id.values()) >= 4
    assert vocab.size == 7


def test_vocabulary_file_round_trip(tmp_path):
    vocab = Vocabulary.build(["alpha beta beta gamma"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#gclm-vocab v1")
    assert "[CLS]" in lines[0]
    # line number after the header equals id - 4
    assert lines[1 + vocab.token_to_id["beta"] - 4] == "beta"
    assert Vocabulary.load(path) == vocab


def test_test_only_words_map_to_unk():
    texts = ["shared alpha", "shared beta", "shared onlyintest"]
    split = make_split(10, 0)
    corpus = [texts[i % 2] for i in range(10)]
    for i in split.test:
        corpus[i] = texts[2]
    vocab = Vocabulary.build(corpus[i] for i in split.train)
    assert "onlyintest" not in vocab.token_to_id
    seq = tokenize(corpus[split.test[0]], vocab, 16)
    assert seq[2] == UNK


def test_inject_minimal_sequence():
    rng = np.random.default_rng(0)
    d = 6
    pos = Tensor(rng.normal(size=(8, d)))
    tokens = Tensor(rng.normal(size=(2, d)))
    gc = Tensor(rng.normal(size=d))
    out = inject_gc_token(tokens, gc, pos).data
    assert out.shape == (3, d)
    np.testing.assert_allclose(out[1], _ln_rows(gc.data + pos.data[1]), atol=1e-12)
    np.testing.assert_allclose(out[0], _ln_rows(tokens.data[0] + pos.data[0]), atol=1e-12)
    np.testing.assert_allclose(out[2], _ln_rows(tokens.data[1] + pos.data[2]), atol=1e-12)


def test_inject_zero_gc_gives_normed_position():
    rng = np.random.default_rng(1)
    pos = Tensor(rng.normal(size=(8, 4)))
    out = inject_gc_token(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), pos).data
    np.testing.assert_allclose(out[1], _ln_rows(pos.data[1]), atol=1e-12)


@pytest.mark.parametrize("L", [1, 2, 5, 7])
def test_inject_length_and_cls_independence(L):
    rng = np.random.default_rng(L)
    pos = Tensor(rng.normal(size=(8, 4)))
    tokens = Tensor(rng.normal(size=(L, 4)))
    a = inject_gc_token(tokens, Tensor(rng.normal(size=4)), pos).data
    b = inject_gc_token(tokens, Tensor(rng.normal(size=4)), pos).data
    assert a.shape == (L + 1, 4)
    np.testing.assert_array_equal(a[0], b[0])


def test_inject_is_deterministic():
    rng = np.random.default_rng(2)
    args = [Tensor(rng.normal(size=s)) for s in ((4, 5), (5,), (9, 5))]
    assert inject_gc_token(*args).data.tobytes() == inject_gc_token(*args).data.tobytes()


def test_inject_overflow_drops_body_not_gc():
    rng = np.random.default_rng(3)
    pos = Tensor(rng.normal(size=(4, 3)))
    tokens = Tensor(rng.normal(size=(4, 3)))
    gc = Tensor(rng.normal(size=3))
    out = inject_gc_token(tokens, gc, pos).data
    assert out.shape == (4, 3)
    np.testing.assert_allclose(out[1], _ln_rows(gc.data + pos.data[1]), atol=1e-12)
    # last kept row is the final token (the [SEP] slot)
    np.testing.assert_allclose(out[3], _ln_rows(tokens.data[3] + pos.data[3]), atol=1e-12)


def test_inject_rejects_wrong_gc_dimension():
    with pytest.raises(DimensionError):
        inject_gc_token(Tensor(np.zeros((2, 4))), Tensor(np.zeros(3)), Tensor(np.zeros((8, 4))))


def test_model_embedding_matches_inject_function():
    lm = MiniLM(20, d=8, layers=1, heads=2, ff=16, max_len=10, rng=np.random.default_rng(4))
    seq = [CLS, 5, 6, 7, SEP]
    gc = Tensor(np.random.default_rng(5).normal(size=8))
    x, mask = lm.embed([seq], T.reshape(gc, (1, 8)))
    raw = lm.embedding.table.data[seq]
    ref = inject_gc_token(Tensor(raw), gc, lm.embedding.positional, lm.embed_norm.gamma, lm.embed_norm.beta)
    np.testing.assert_allclose(x.data[0], ref.data, atol=1e-12)
    assert mask.all()


def _tiny_lm(seed=0, p=0.0):
    return MiniLM(30, d=8, layers=2, heads=2, ff=16, max_len=16, p_drop=p, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("length", [2, 5, 14])
def test_encode_output_dimension(length):
    lm = _tiny_lm()
    seq = [CLS] + [4 + k % 20 for k in range(length - 2)] + [SEP]
    assert lm.encode(seq).shape == (8,)
    assert lm.encode(seq, Tensor(np.ones(8))).shape == (8,)


def test_gc_changes_output_through_attention_only():
    lm = _tiny_lm(1)
    seq = [CLS, 4, 5, 6, SEP]
    plain = lm.encode(seq).data
    with_zero = lm.encode(seq, Tensor(np.zeros(8))).data
    assert not np.allclose(plain, with_zero)
    # a single-block LM with zeroed attention outputs ignores the extra slot
    lm1 = MiniLM(30, d=8, layers=1, heads=2, ff=16, max_len=16, p_drop=0.0, rng=np.random.default_rng(2))
    lm1.blocks[0].attention.o.weight.data[...] = 0.0
    a = lm1.encode(seq).data
    b = lm1.encode(seq, Tensor(np.zeros(8))).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gradient_flows_into_gc_vector():
    lm = _tiny_lm(3)
    head = Tensor(np.random.default_rng(4).normal(size=8))
    seq = [CLS, 4, 9, 11, SEP]
    gc = Tensor(np.random.default_rng(5).normal(size=8))
    err = finite_diff_check(lambda g: T.tsum(T.mul(lm.encode(seq, g), head)), gc, step=1e-5)
    assert err < 1e-3
    g = Tensor(gc.data.copy(), requires_grad=True)
    T.backward(T.tsum(T.mul(lm.encode(seq, g), head)))
    assert np.abs(g.grad).max() > 0


def test_encode_rejects_wrong_gc_dimension():
    with pytest.raises(DimensionError):
        _tiny_lm().encode([CLS, SEP], Tensor(np.zeros(5)))


def test_frozen_encode_is_pure():
    lm = _tiny_lm(6, p=0.1)
    lm.freeze()
    seq = [CLS, 4, 5, SEP]
    assert lm.encode(seq).data.tobytes() == lm.encode(seq).data.tobytes()


def test_batch_encoding_matches_single_with_padding():
    lm = _tiny_lm(7)
    seqs = [[CLS, 4, 5, 6, 7, SEP], [CLS, 8, SEP]]
    batch = lm.encode_batch(seqs).data
    for r, s in enumerate(seqs):
        np.testing.assert_allclose(batch[r], lm.encode(s).data, atol=1e-12)


def test_random_gc_vector_statistics_and_determinism():
    rng = np.random.default_rng(8)
    sample = random_gc_vector(10_000, rng).data
    assert -0.05 <= sample.mean() <= 0.05
    a, b = random_gc_vector(8, rng).data, random_gc_vector(8, rng).data
    assert not np.array_equal(a, b)
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert np.array_equal(random_gc_vector(8, r1).data, random_gc_vector(8, r2).data)
    with pytest.raises(ValueError):
        random_gc_vector(0, rng)
