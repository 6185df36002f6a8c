"""Finite-difference audit of every differentiable operation and both full models.

Primitive ops are looked up on the tensor module at call time, so a replaced
(for instance deliberately broken) implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gnn
from . import tensor as T
from .layers import MultiHeadAttention, TransformerBlock
from .lm import CLS, SEP, MiniLM
from .tensor import Tensor, finite_diff_check, finite_diff_check_params

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _op(name: str) -> Callable:
    return getattr(T, name)


def _away_from_zero(a: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return a + margin * np.sign(a)


def _head(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Scalar readout with fixed random weights, so every output coordinate matters."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.tsum(T.mul(out, Tensor(w)))


def _unary(name: str, x: np.ndarray, **kw) -> float:
    return finite_diff_check(lambda v: _head(_op(name)(v, **kw)), Tensor(x), STEP)


def _binary(name: str, a: np.ndarray, b: np.ndarray) -> float:
    A, B = Tensor(a), Tensor(b)
    err_a = finite_diff_check(lambda v: _head(_op(name)(v, B)), A, STEP)
    err_b = finite_diff_check(lambda v: _head(_op(name)(A, v)), B, STEP)
    return max(err_a, err_b)


def _primitive_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    kinked = _away_from_zero(x)
    gap = x + np.where(y >= x, -0.2, 0.2)     # keep the two operands apart
    ids = np.array([2, 0, 2, 1])

    def layer_norm() -> float:
        g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        X = Tensor(x)
        return max(
            finite_diff_check(lambda v: _head(_op("layer_norm")(v, g, b)), X, STEP),
            finite_diff_check(lambda v: _head(_op("layer_norm")(X, v, b)), g, STEP),
            finite_diff_check(lambda v: _head(_op("layer_norm")(X, g, v)), b, STEP),
        )

    def add_broadcast() -> float:
        X, B = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(3, 4)))
        return max(finite_diff_check(lambda v: _head(_op("add_broadcast")(v, B)), X, STEP),
                   finite_diff_check(lambda v: _head(_op("add_broadcast")(X, v)), B, STEP))

    def matmul() -> float:
        err = _binary("matmul", x, rng.normal(size=(4, 2)))
        Xb, W = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 5)))
        err = max(err, finite_diff_check(lambda v: _head(_op("matmul")(v, W)), Xb, STEP),
                  finite_diff_check(lambda v: _head(_op("matmul")(Xb, v)), W, STEP))
        return err

    def take_rows() -> float:
        return finite_diff_check(lambda v: _head(_op("take_rows")(v, ids)), Tensor(x), STEP)

    def scatter_rows() -> float:
        base = rng.normal(size=(5, 4))
        return finite_diff_check(lambda v: _head(_op("scatter_rows")(base, [4, 1, 0], v)),
                                 Tensor(x), STEP)

    def concat() -> float:
        A, B = Tensor(x), Tensor(rng.normal(size=(3, 2)))
        return max(finite_diff_check(lambda v: _head(_op("concat")([v, B], axis=1)), A, STEP),
                   finite_diff_check(lambda v: _head(_op("concat")([A, v], axis=1)), B, STEP))

    def mask_fill() -> float:
        mask = rng.random((3, 4)) < 0.4
        return finite_diff_check(lambda v: _head(_op("mask_fill")(v, mask, -5.0)), Tensor(x), STEP)

    def dropout() -> float:
        # a fresh generator per call pins the mask across perturbations
        return finite_diff_check(
            lambda v: _head(_op("dropout")(v, 0.3, True, np.random.default_rng(7))), Tensor(x), STEP)

    def cross_entropy() -> float:
        return finite_diff_check(lambda v: _op("cross_entropy")(v, [0, 3, 1]), Tensor(x), STEP)

    def reductions() -> float:
        return max(finite_diff_check(lambda v: T.mul(_op("tsum")(v), _op("tsum")(v)), Tensor(x), STEP),
                   finite_diff_check(lambda v: T.mul(_op("mean")(v), _op("mean")(v)), Tensor(x), STEP))

    return [
        ("add", lambda: _binary("add", x, y)),
        ("sub", lambda: _binary("sub", x, y)),
        ("mul", lambda: _binary("mul", x, y)),
        ("scale", lambda: _unary("scale", x, s=-1.7)),
        ("add_broadcast", add_broadcast),
        ("matmul", matmul),
        ("relu", lambda: _unary("relu", kinked)),
        ("leaky_relu", lambda: _unary("leaky_relu", kinked)),
        ("tanh", lambda: _unary("tanh", x)),
        ("gelu", lambda: _unary("gelu", x)),
        ("maximum", lambda: _binary("maximum", gap, y)),
        ("softmax", lambda: _unary("softmax", x)),
        ("log_softmax", lambda: _unary("log_softmax", x)),
        ("layer_norm", layer_norm),
        ("tsum/mean", reductions),
        ("reshape", lambda: _unary("reshape", x, shape=(2, 6))),
        ("transpose", lambda: _unary("transpose", x)),
        ("getitem", lambda: _unary("getitem", x, idx=(slice(0, 2), slice(1, 4)))),
        ("take_rows", take_rows),
        ("scatter_rows", scatter_rows),
        ("concat", concat),
        ("mask_fill", mask_fill),
        ("dropout", dropout),
        ("cross_entropy", cross_entropy),
    ]


def _model_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    A = np.array([[0, 1, 0, 0], [0, 0, 1, 1], [1, 0, 0, 0], [0, 0, 0, 0]], dtype=float)

    def gcn_layer() -> float:
        adj = gnn.normalize_adjacency(A)
        X, W = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 2)))
        return max(finite_diff_check(lambda v: _head(gnn.gcn_layer(v, adj, W, "tanh")), X, STEP),
                   finite_diff_check(lambda v: _head(gnn.gcn_layer(X, adj, v, "tanh")), W, STEP))

    def gat_layer() -> float:
        X, W, a = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=4))
        return max(finite_diff_check(lambda v: _head(gnn.gat_layer(v, A, W, a)), X, STEP),
                   finite_diff_check(lambda v: _head(gnn.gat_layer(X, A, v, a)), W, STEP),
                   finite_diff_check(lambda v: _head(gnn.gat_layer(X, A, W, v)), a, STEP))

    def attention() -> float:
        mha = MultiHeadAttention(4, 2, rng)
        X = Tensor(rng.normal(size=(3, 4)))
        mask = np.array([True, True, False])
        return max(finite_diff_check(lambda v: _head(mha(v, mask)), X, STEP),
                   finite_diff_check_params(lambda: _head(mha(X, mask)), mha.parameters(), STEP, 6, rng))

    def block() -> float:
        blk = TransformerBlock(4, 2, 8, rng)
        X = Tensor(rng.normal(size=(3, 4)))
        return max(finite_diff_check(lambda v: _head(blk(v)), X, STEP),
                   finite_diff_check_params(lambda: _head(blk(X)), blk.parameters(), STEP, 6, rng))

    def mini_lm() -> float:
        lm = MiniLM(12, d=8, layers=2, heads=2, ff=16, max_len=10, p_drop=0.0, rng=rng)
        seq = [CLS, 5, 7, 4, SEP]
        gc = Tensor(rng.normal(size=8))
        return max(finite_diff_check(lambda v: _head(lm.encode(seq, v)), gc, STEP),
                   finite_diff_check_params(lambda: _head(lm.encode(seq, gc)), lm.parameters(), STEP, 4, rng))

    def gcn_model() -> float:
        model = gnn.GNN(gnn.GNNSpec(dims=(3, 5, 2), dropout=0.0), rng)
        graph = gnn.GraphContext(A)
        V = Tensor(rng.normal(size=(4, 3)))
        return max(finite_diff_check(lambda v: _head(model(v, graph)), V, STEP),
                   finite_diff_check_params(lambda: _head(model(V, graph)), model.parameters(), STEP))

    return [
        ("gcn_layer", gcn_layer),
        ("gat_layer", gat_layer),
        ("attention", attention),
        ("transformer_block", block),
        ("mini_lm+gc", mini_lm),
        ("gcn_2layer", gcn_model),
    ]


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for group, tol in ((_primitive_checks(rng), PRIMITIVE_TOL), (_model_checks(rng), MODEL_TOL)):
        for name, check in group:
            try:
                err = float(check())
            except Exception:                       # a broken op counts as a failed check
                err = float("inf")
            if not np.isfinite(err):
                err = float("inf")
            results.append(CheckResult(name, err, tol))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max_rel_err={r.error:.3e}  tol={r.tolerance:.0e}  "
             f"{'PASS' if r.passed else 'FAIL'}" for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed"
                 + (f"; failing: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
