import math

import numpy as np
import pytest
from oracles import balanced_error_reference, macro_f1_reference

from gclm import tensor as T
from gclm.data import generate_synthetic, make_split
from gclm.fusion import ArchitectureSpec, ModelConfig
from gclm.tensor import Tensor, finite_diff_check
from gclm.train import (
    AdamState,
    RunResult,
    TrainConfig,
    adam_step,
    aggregate_runs,
    balanced_error,
    cross_entropy,
    macro_f1,
    train_model,
)

TINY = ModelConfig(d=16, layers=1, heads=2, ff=32, max_len=24, gnn_hidden=(16,))


def test_cross_entropy_examples():
    assert abs(cross_entropy(Tensor(np.zeros((1, 3))), [2]).item() - math.log(3)) < 1e-15
    assert cross_entropy(Tensor([[20.0, 0.0, 0.0]]), [0]).item() < 1e-8
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 3)))
    assert finite_diff_check(lambda z: cross_entropy(z, [0, 2]), logits, step=1e-6) < 1e-5


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.zeros(4), requires_grad=True)
    state = AdamState([([p], 1e-3)])
    adam_step([p], [np.array([0.5, -2.0, 3.0, 1e-2])], state)
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-5)
    np.testing.assert_array_equal(np.sign(p.data), [-1, 1, -1, -1])


def test_adam_zero_gradient_and_step_counter():
    p = Tensor(np.ones(3), requires_grad=True)
    state = AdamState([([p], 1e-3)])
    adam_step([p], [np.zeros(3)], state)
    assert state.t == 1
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_adam_skips_frozen_parameters():
    p = Tensor(np.arange(3.0), requires_grad=True)
    p.frozen = True
    state = AdamState([([p], 1e-1)])
    for _ in range(25):
        adam_step([p], [np.ones(3)], state)
    assert p.data.tobytes() == np.arange(3.0).tobytes()
    assert not state.m[id(p)].any()


def test_adam_groups_use_their_own_rates():
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState([([a], 1e-3), ([b], 1e-4)])
    adam_step([a, b], [np.ones(1), np.ones(1)], state)
    assert abs(a.data[0] + 1e-3) < 1e-9 and abs(b.data[0] + 1e-4) < 1e-9


def test_balanced_error_examples():
    assert balanced_error([0, 1, 2], [0, 1, 2], 3) == 0.0
    labels = [0] * 10 + [1] * 10 + [2] * 10
    pred = [0] * 9 + [1] + [1] * 5 + [0] * 5 + [2] * 10
    assert balanced_error(pred, labels, 3) == pytest.approx(20.0, abs=1e-12)
    assert balanced_error([0] * 30, labels, 3) == pytest.approx(100 - 100 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        balanced_error([0, 1], [0, 1], 3)


def test_macro_f1_examples():
    assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 100.0
    assert macro_f1([0, 0, 1, 1, 1], [0, 0, 0, 1, 1], 2) == pytest.approx(80.0, abs=1e-12)
    # class 1 never predicted: its F1 of 0 halves the score
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(100 * (2 * 0.5 / 1.5) / 2, abs=1e-12)


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = int(rng.integers(2, 6))
        size = int(rng.integers(c, 60))
        labels = np.concatenate([np.arange(c), rng.integers(0, c, size - c)])
        pred = rng.integers(0, c, size)
        assert balanced_error(pred, labels, c) == balanced_error_reference(pred, labels, c)
        assert macro_f1(pred, labels, c) == macro_f1_reference(pred, labels, c)


def test_balanced_error_relabeling_invariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        labels = np.concatenate([np.arange(4), rng.integers(0, 4, 40)])
        pred = rng.integers(0, 4, 44)
        perm = rng.permutation(4)
        assert balanced_error(perm[pred], perm[labels], 4) == pytest.approx(
            balanced_error(pred, labels, 4), abs=1e-12)


def _result(err, f1=50.0):
    return RunResult(0, "LM", err, f1, 1)


def test_aggregate_examples():
    assert aggregate_runs([_result(8.0), _result(10.0)]).mean_error == 9.0
    one = aggregate_runs([_result(7.5)])
    assert one.mean_error == 7.5 and one.std_error == 0.0
    assert aggregate_runs([_result(4.0)] * 10).std_error == 0.0
    agg = aggregate_runs([_result(1.0), _result(2.0), _result(6.0)])
    assert agg.std_error == pytest.approx(np.std([1, 2, 6], ddof=1))
    assert (agg.min_error, agg.max_error) == (1.0, 6.0)
    with pytest.raises(ValueError):
        aggregate_runs([])


@pytest.fixture(scope="module")
def small_graph():
    return generate_synthetic(n=120, seed=2)


def test_training_is_deterministic(small_graph):
    split = make_split(small_graph.n, 4)
    cfg = TrainConfig(max_epochs=3, tfidf_cap=100)
    spec = ArchitectureSpec("early_fusion_gcbert", skip_connection=True)
    a = train_model(small_graph, split, spec, cfg, TINY)
    b = train_model(small_graph, split, spec, cfg, TINY)
    assert (a.balanced_error, a.macro_f1, a.best_epoch, a.epoch_trace) == (
        b.balanced_error, b.macro_f1, b.best_epoch, b.epoch_trace)


def test_best_epoch_is_validation_minimum(small_graph):
    r = train_model(small_graph, make_split(small_graph.n, 1), ArchitectureSpec("gnn_only"),
                    TrainConfig(max_epochs=15, patience=3, tfidf_cap=100), TINY)
    vals = [v for _, _, v in r.epoch_trace]
    assert vals[r.best_epoch - 1] == min(vals)
    assert vals.index(min(vals)) == r.best_epoch - 1
    assert 0.0 <= r.balanced_error <= 100.0 and 0.0 <= r.macro_f1 <= 100.0
    # early stop happened exactly patience epochs after the best one, or at the cap
    assert len(vals) in (r.best_epoch + 3, 15)


def test_spec_errors_surface_before_training(small_graph):
    from gclm.fusion import SpecError
    with pytest.raises(SpecError):
        train_model(small_graph, make_split(small_graph.n, 0), ArchitectureSpec("looped_gcbert", freeze_lm=True))


@pytest.mark.parametrize("spec", [
    dict(wiring="lm_only"),
    dict(wiring="gnn_only"),
    dict(wiring="gnn_only", gnn_kind="gat"),
    dict(wiring="late_fusion"),
    dict(wiring="early_fusion_gcbert"),
    dict(wiring="early_fusion_gcbert", random_n=True),
    dict(wiring="compositional"),
    dict(wiring="looped_gcbert"),
])
def test_loss_decreases_over_first_five_epochs(small_graph, spec):
    r = train_model(small_graph, make_split(small_graph.n, 0), ArchitectureSpec(**spec),
                    TrainConfig(max_epochs=5, patience=10, tfidf_cap=100), TINY)
    assert len(r.epoch_trace) == 5
    assert r.epoch_trace[4][1] < r.epoch_trace[0][1]


def test_frozen_lm_untouched_over_full_run(small_graph, monkeypatch):
    from gclm import train as train_mod
    captured = {}
    real_fit = train_mod._fit

    def spy(model, split, cfg, rngs, max_epochs):
        if model.spec.wiring == "late_fusion":
            captured["before"] = [p.data.copy() for p in model.lm.parameters()]
            captured["model"] = model
        return real_fit(model, split, cfg, rngs, max_epochs)

    monkeypatch.setattr(train_mod, "_fit", spy)
    train_model(small_graph, make_split(small_graph.n, 0), ArchitectureSpec("late_fusion", freeze_lm=True),
                TrainConfig(max_epochs=3, tfidf_cap=100), TINY)
    after = [p.data for p in captured["model"].lm.parameters()]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(captured["before"], after))


def test_lm_learns_a_pure_text_corpus():
    g = generate_synthetic(text_signal=1.0, graph_signal=0.0)
    r = train_model(g, make_split(g.n, 0), ArchitectureSpec("lm_only"),
                    TrainConfig(max_epochs=15, patience=4), ModelConfig(d=32, layers=2, heads=4, ff=64))
    assert r.balanced_error < 10.0
