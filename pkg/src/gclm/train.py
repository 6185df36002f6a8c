"""Optimization, evaluation metrics and the shared training loop."""

from __future__ import annotations

import math
from fractions import Fraction
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import DocumentGraph, Split, tfidf_vectorize
from .fusion import ArchitectureSpec, FusionModel, ModelConfig, PreparedGraph
from .gnn import GraphContext
from .lm import Vocabulary, tokenize
from .tensor import Tensor

cross_entropy = T.cross_entropy


class AdamState:
    """Adam with bias correction; parameters flagged ``frozen`` are skipped entirely."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.groups = [(list(params), lr) for params, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if p.frozen or p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                g = p.grad
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Install ``grads`` on ``params`` and apply one update in place."""
    for p, g in zip(params, grads):
        p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step()
    return state


def _confusion(predictions, labels, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def balanced_error(predictions, labels, num_classes: int) -> float:
    """100 minus the mean per-class recall, in percent.

    Computed in exact rational arithmetic and rounded once, so the value does
    not depend on summation order.
    """
    cm = _confusion(predictions, labels, num_classes)
    support = cm.sum(axis=1)
    if np.any(support == 0):
        missing = [int(k) for k in np.flatnonzero(support == 0)]
        raise ValueError(f"classes {missing} absent from labels; recall undefined")
    recall = sum(Fraction(int(cm[k, k]), int(support[k])) for k in range(num_classes))
    return float(100 - 100 * recall / num_classes)


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1 in percent; F1 is 0 when P + R = 0."""
    cm = _confusion(predictions, labels, num_classes)
    total = Fraction(0)
    for k in range(num_classes):
        tp = int(cm[k, k])
        # F1 = 2 tp / (predicted + actual), which is 0 exactly when P + R = 0
        denom = int(cm[:, k].sum()) + int(cm[k].sum())
        if tp:
            total += Fraction(2 * tp, denom)
    return float(100 * total / num_classes)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    lr_lm: float = 1e-3
    tfidf_cap: int = 500
    pretrain_epochs: int | None = None


@dataclass
class RunResult:
    seed: int
    architecture: str
    balanced_error: float
    macro_f1: float
    best_epoch: int
    epoch_trace: list[tuple[int, float, float]] = field(default_factory=list)
    wall_seconds: float = 0.0


def prepare(graph: DocumentGraph, split: Split, model_cfg: ModelConfig, train_cfg: TrainConfig
            ) -> tuple[PreparedGraph, Vocabulary]:
    """Vocabulary and TF-IDF are fit on the training split only."""
    texts = graph.texts
    vocab = Vocabulary.build(texts[i] for i in split.train)
    seqs = [tokenize(t, vocab, model_cfg.max_len) for t in texts]
    V = tfidf_vectorize(texts, train_cfg.tfidf_cap, split.train)
    data = PreparedGraph(seqs, V, GraphContext(graph.adjacency), graph.labels, graph.num_classes)
    return data, vocab


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "dropout", "order", "pretrain")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _fit(model: FusionModel, split: Split, cfg: TrainConfig, rngs, max_epochs: int
         ) -> tuple[int, list[tuple[int, float, float]]]:
    """Epoch loop with validation early stopping; leaves the best state loaded."""
    opt = AdamState([(model.lm_parameters(), cfg.lr_lm), (model.other_parameters(), cfg.lr)])
    labels = model.data.labels
    nc = model.data.num_classes
    train_idx = np.array(split.train, dtype=np.int64)
    val_idx = np.array(split.validation, dtype=np.int64)
    model.initialize_banks()
    best_err, best_epoch = math.inf, 0
    best_state, best_bank = model.state(), model.bank.copy()
    trace: list[tuple[int, float, float]] = []
    stale = 0
    for epoch in range(1, max_epochs + 1):
        order = rngs["order"].permutation(train_idx)
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            opt.zero_grad()
            logits = model.step(batch, training=True, rng=rngs["dropout"])
            loss = cross_entropy(logits, labels[batch])
            T.backward(loss)
            opt.step()
            losses.append(loss.item() * len(batch))
        val_pred = model.predict(val_idx).argmax(axis=1)
        val_err = _safe_balanced_error(val_pred, labels[val_idx], nc)
        trace.append((epoch, float(np.sum(losses) / len(order)), val_err))
        if val_err < best_err:
            best_err, best_epoch = val_err, epoch
            best_state, best_bank = model.state(), model.bank.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    model.bank = best_bank
    return best_epoch, trace


def _safe_balanced_error(pred, labels, nc) -> float:
    # validation folds on tiny corpora may miss a class; score only the present ones
    present = np.unique(labels)
    if len(present) == nc:
        return balanced_error(pred, labels, nc)
    recalls = [np.mean(pred[labels == k] == k) for k in present]
    return 100.0 - 100.0 * float(np.mean(recalls))


def _pretrain_component(spec: ArchitectureSpec, data, vocab_size, model_cfg, cfg, split, rngs, which: str):
    """Train a component on the task with its own classifier, then freeze it."""
    wiring = "gnn_only" if which == "gnn" else "lm_only"
    helper_spec = ArchitectureSpec(wiring, gnn_kind=spec.gnn_kind, vectorizer=spec.vectorizer)
    gnn = None
    if which == "gnn":
        # shape the helper GNN exactly as the fused model will use it
        from .gnn import GNN
        gnn = GNN(FusionModel.gnn_spec(spec, data, model_cfg), rngs["pretrain"])
    helper = FusionModel(helper_spec, data, vocab_size, model_cfg, rngs["pretrain"], gnn=gnn)
    _fit(helper, split, cfg, rngs, cfg.pretrain_epochs or cfg.max_epochs)
    component = helper.gnn if which == "gnn" else helper.lm
    component.freeze()
    return component


def build_model(spec: ArchitectureSpec, data: PreparedGraph, vocab_size: int, model_cfg: ModelConfig,
                cfg: TrainConfig, split: Split, rngs) -> FusionModel:
    gnn = lm = None
    if spec.freeze_gnn:
        gnn = _pretrain_component(spec, data, vocab_size, model_cfg, cfg, split, rngs, "gnn")
    if spec.freeze_lm:
        lm = _pretrain_component(spec, data, vocab_size, model_cfg, cfg, split, rngs, "lm")
    return FusionModel(spec, data, vocab_size, model_cfg, rngs["init"], lm=lm, gnn=gnn)


def run_training(graph: DocumentGraph, split: Split, spec: ArchitectureSpec,
                 train_cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
                 prepared: tuple[PreparedGraph, Vocabulary] | None = None
                 ) -> tuple[RunResult, FusionModel, Vocabulary]:
    """Train one seed and return the result together with the best model state."""
    spec.validate()
    start = time.perf_counter()
    data, vocab = prepared if prepared is not None else prepare(graph, split, model_cfg, train_cfg)
    rngs = _rngs(split.seed)
    model = build_model(spec, data, vocab.size, model_cfg, train_cfg, split, rngs)
    best_epoch, trace = _fit(model, split, train_cfg, rngs, train_cfg.max_epochs)
    test_idx = np.array(split.test, dtype=np.int64)
    pred = model.predict(test_idx).argmax(axis=1)
    y = data.labels[test_idx]
    result = RunResult(
        seed=split.seed,
        architecture=spec.label,
        balanced_error=balanced_error(pred, y, data.num_classes),
        macro_f1=macro_f1(pred, y, data.num_classes),
        best_epoch=best_epoch,
        epoch_trace=trace,
        wall_seconds=time.perf_counter() - start,
    )
    return result, model, vocab


def train_model(graph: DocumentGraph, split: Split, spec: ArchitectureSpec,
                train_cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
                prepared: tuple[PreparedGraph, Vocabulary] | None = None) -> RunResult:
    return run_training(graph, split, spec, train_cfg, model_cfg, prepared)[0]


@dataclass(frozen=True)
class Aggregate:
    n: int
    mean_error: float
    std_error: float
    mean_f1: float
    std_f1: float
    min_error: float
    max_error: float


def aggregate_runs(results: Sequence[RunResult]) -> Aggregate:
    """Arithmetic mean and sample standard deviation (0 for a single run)."""
    if not results:
        raise ValueError("no results to aggregate")
    err = np.array([r.balanced_error for r in results])
    f1 = np.array([r.macro_f1 for r in results])
    ddof = 1 if len(results) > 1 else 0
    return Aggregate(len(results), float(err.mean()), float(err.std(ddof=ddof)),
                     float(f1.mean()), float(f1.std(ddof=ddof)), float(err.min()), float(err.max()))
