"""Command-line harness: data generation, training, the ablation grid, gradient checks, reports.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import multiprocessing as mp
import os
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import config as C
from .data import CorpusError, DocumentGraph, generate_synthetic, load_corpus, make_split, write_corpus
from .fusion import ArchitectureSpec
from .gradcheck import format_report, run_checks
from .layers import save_parameters
from .train import RunResult, aggregate_runs, run_training

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
RESULT_COLUMNS = ("variant", "seed", "balanced_error", "macro_f1", "best_epoch")
TABLE_COLUMNS = ("variant", "architecture", "runs", "mean_error", "std_error", "mean_f1", "std_f1",
                 "min_error", "max_error")


class InputError(ValueError):
    """Unusable command input (missing or malformed files)."""


# -- small file helpers ------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path: Path, entries: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()), encoding="utf-8")


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _result_line(variant: str, seed, err: float, f1: float, best) -> str:
    return "\t".join((variant, str(seed), _fmt(err), _fmt(f1), str(best))) + "\n"


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _output_dir(cfg: C.RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_graph(cfg: C.RunConfig) -> DocumentGraph:
    if cfg.corpus.path:
        return load_corpus(cfg.corpus.path)
    return generate_synthetic(cfg.corpus.synthetic)


# -- single runs (also executed inside worker processes) ----------------------

@dataclass(frozen=True)
class Job:
    spec: ArchitectureSpec
    seed: int
    cfg: C.RunConfig
    model_dir: str | None = None


@dataclass
class JobOutcome:
    job: Job
    result: RunResult | None
    error: str | None


_GRAPH_CACHE: dict[tuple, DocumentGraph] = {}


def _graph_for(cfg: C.RunConfig) -> DocumentGraph:
    key = (cfg.corpus.path, cfg.corpus.synthetic)
    if key not in _GRAPH_CACHE:
        _GRAPH_CACHE.clear()
        _GRAPH_CACHE[key] = _load_graph(cfg)
    return _GRAPH_CACHE[key]


def execute(job: Job) -> JobOutcome:
    try:
        graph = _graph_for(job.cfg)
        split = make_split(graph.n, job.seed)
        result, model, vocab = run_training(graph, split, job.spec, job.cfg.train, job.cfg.model)
        if job.model_dir:
            stem = Path(job.model_dir) / f"{job.spec.slug}_seed{job.seed}"
            for name, module in (("lm", model.lm), ("gnn", model.gnn), ("classifier", model.classifier)):
                if module is not None:
                    save_parameters(module, f"{stem}.{name}.params")
            vocab.save(f"{stem}.vocab")
        return JobOutcome(job, result, None)
    except Exception as exc:
        return JobOutcome(job, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")


def _run_jobs(jobs: Sequence[Job], workers: int) -> Iterable[JobOutcome]:
    """Yield outcomes in job order; the caller is the single writer."""
    workers = workers or os.cpu_count() or 1
    workers = min(workers, len(jobs))
    if workers <= 1:
        for job in jobs:
            yield execute(job)
        return
    with mp.get_context("spawn").Pool(workers) as pool:
        yield from pool.imap(execute, jobs)


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: C.RunConfig) -> int:
    out = _output_dir(cfg)
    started = _now()
    graph = generate_synthetic(cfg.corpus.synthetic)
    corpus = out / "corpus.jsonl"
    write_corpus(graph, corpus)
    params = {f"generator.{k}": v for k, v in cfg.corpus.synthetic.__dict__.items()}
    _write_manifest(out / "corpus.manifest", {
        "command": "gen-data",
        "config_hash": cfg.content_hash(),
        "corpus_sha256": _file_hash(corpus),
        **params,
        "documents": graph.n,
        "edges": len(graph.edges),
        "homophily": f"{graph.homophily():.6f}",
        "started": started,
        "finished": _now(),
    })
    print(f"wrote {graph.n} documents, {len(graph.edges)} edges, homophily {graph.homophily():.4f} -> {corpus}")
    return EXIT_OK


def _write_results(path: Path, spec: ArchitectureSpec, outcomes: Iterable[JobOutcome],
                   wall: dict[int, float]) -> tuple[list[RunResult], list[str]]:
    """Stream rows as runs complete; append the aggregate row at the end."""
    results, failures = [], []
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(RESULT_COLUMNS) + "\n")
        fh.flush()
        for o in outcomes:
            if o.result is None:
                failures.append(f"seed {o.job.seed}: {o.error.splitlines()[0]}")
                print(f"[{spec.slug}] seed {o.job.seed} FAILED: {o.error}", file=sys.stderr)
                continue
            r = o.result
            results.append(r)
            wall[r.seed] = r.wall_seconds
            fh.write(_result_line(spec.slug, r.seed, r.balanced_error, r.macro_f1, r.best_epoch))
            fh.flush()
            print(f"[{spec.slug}] seed {r.seed}: balanced error {r.balanced_error:.2f}%, "
                  f"macro F1 {r.macro_f1:.2f}%, best epoch {r.best_epoch}")
        if results and not failures:
            agg = aggregate_runs(results)
            fh.write(_result_line(spec.slug, "mean", agg.mean_error, agg.mean_f1, ""))
    return results, failures


def cmd_train(cfg: C.RunConfig) -> int:
    out = _output_dir(cfg)
    spec = cfg.architecture
    started = _now()
    graph = _load_graph(cfg)
    model_dir = out / "models"
    model_dir.mkdir(exist_ok=True)
    jobs = [Job(spec, s, cfg, str(model_dir)) for s in cfg.run.seeds]
    wall: dict[int, float] = {}
    results, failures = _write_results(out / "results.tsv", spec, _run_jobs(jobs, cfg.run.workers), wall)
    (out / "config.ini").write_text(C.serialize(cfg), encoding="utf-8")
    _write_manifest(out / "results.manifest", {
        "command": "train",
        "config_hash": cfg.content_hash(),
        "variant": spec.slug,
        "architecture": spec.label,
        "seeds": ",".join(map(str, cfg.run.seeds)),
        "documents": graph.n,
        "homophily": f"{graph.homophily():.6f}",
        "status": "failed" if failures else "complete",
        **{f"wall_seconds.seed{s}": f"{w:.2f}" for s, w in sorted(wall.items())},
        "started": started,
        "finished": _now(),
    })
    if failures:
        print(f"{len(failures)} run(s) failed; partial results kept in {out / 'results.tsv'}", file=sys.stderr)
        return EXIT_RUNTIME
    agg = aggregate_runs(results)
    print(f"{spec.label}: mean balanced error {agg.mean_error:.2f}% (std {agg.std_error:.2f}), "
          f"mean macro F1 {agg.mean_f1:.2f}%")
    return EXIT_OK


def _variant_hash(cfg: C.RunConfig, spec: ArchitectureSpec) -> str:
    return hashlib.sha256(f"{cfg.content_hash()}|{spec.slug}".encode()).hexdigest()[:16]


def _table_rows(pooled: dict[str, list[tuple[float, float]]], labels: dict[str, str]) -> list[tuple]:
    rows = []
    for variant, pairs in pooled.items():
        fake = [RunResult(0, variant, e, f, 0) for e, f in pairs]
        a = aggregate_runs(fake)
        rows.append((variant, labels.get(variant, variant), a.n, a.mean_error, a.std_error, a.mean_f1,
                     a.std_f1, a.min_error, a.max_error))
    # highest error first, like the published table; ties broken by name for stable output
    rows.sort(key=lambda r: (-r[3], r[0]))
    return rows


def _render_table(rows: list[tuple]) -> str:
    buf = io.StringIO()
    buf.write("\t".join(TABLE_COLUMNS) + "\n")
    for r in rows:
        buf.write("\t".join([r[0], r[1], str(r[2]), *(_fmt(x) for x in r[3:])]) + "\n")
    return buf.getvalue()


def _print_table(rows: list[tuple]) -> None:
    width = max([len("architecture")] + [len(r[1]) for r in rows])
    print(f"{'architecture':<{width}}  {'mean error':>10}  {'std':>6}  {'mean F1':>8}  runs")
    for r in rows:
        print(f"{r[1]:<{width}}  {r[3]:>9.2f}%  {r[4]:>6.2f}  {r[5]:>7.2f}%  {r[2]}")


def cmd_grid(cfg: C.RunConfig) -> int:
    out = _output_dir(cfg)
    grid_dir = out / "grid"
    grid_dir.mkdir(exist_ok=True)
    variants = cfg.grid()
    todo = []
    for spec in variants:
        manifest = grid_dir / f"{spec.slug}.manifest"
        if manifest.exists():
            m = read_manifest(manifest)
            if m.get("status") == "complete" and m.get("variant_hash") == _variant_hash(cfg, spec):
                print(f"[{spec.slug}] already complete, skipping")
                continue
        todo.append(spec)

    jobs = [Job(spec, s, cfg) for spec in todo for s in cfg.run.seeds]
    outcomes = iter(_run_jobs(jobs, cfg.run.workers)) if jobs else iter(())
    failed_variants = []
    for spec in todo:
        started = _now()
        per_variant = (next(outcomes) for _ in cfg.run.seeds)
        wall: dict[int, float] = {}
        _, failures = _write_results(grid_dir / f"{spec.slug}.tsv", spec, per_variant, wall)
        entries = {
            "command": "grid",
            "variant": spec.slug,
            "architecture": spec.label,
            "variant_hash": _variant_hash(cfg, spec),
            "config_hash": cfg.content_hash(),
            "seeds": ",".join(map(str, cfg.run.seeds)),
            "status": "failed" if failures else "complete",
            **{f"wall_seconds.seed{s}": f"{w:.2f}" for s, w in sorted(wall.items())},
            "started": started,
            "finished": _now(),
        }
        if failures:
            entries["errors"] = " | ".join(failures)
            failed_variants.append(spec.slug)
        _write_manifest(grid_dir / f"{spec.slug}.manifest", entries)

    pooled: dict[str, list[tuple[float, float]]] = {}
    for spec in variants:
        path = grid_dir / f"{spec.slug}.tsv"
        if spec.slug in failed_variants or not path.exists():
            continue
        for variant, _, err, f1 in _read_result_rows(path):
            pooled.setdefault(variant, []).append((err, f1))
    rows = _table_rows(pooled, {s.slug: s.label for s in variants})
    (out / "table.tsv").write_text(_render_table(rows), encoding="utf-8")
    _print_table(rows)
    if failed_variants:
        print(f"failed variants: {', '.join(failed_variants)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _read_result_rows(path: Path) -> list[tuple[str, int, float, float]]:
    """Per-seed rows of a results file; aggregate rows are skipped."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(reader, None)
    if header is None or tuple(header[:len(RESULT_COLUMNS)]) != RESULT_COLUMNS:
        raise InputError(f"{path}:1: expected header {' '.join(RESULT_COLUMNS)}")
    rows = []
    for line_no, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(RESULT_COLUMNS):
            raise InputError(f"{path}:{line_no}: expected {len(RESULT_COLUMNS)} fields, got {len(rec)}")
        if rec[1] == "mean":
            continue
        try:
            rows.append((rec[0], int(rec[1]), float(rec[2]), float(rec[3])))
        except ValueError:
            raise InputError(f"{path}:{line_no}: malformed result row") from None
    return rows


def cmd_aggregate(paths: Sequence[str], out_dir: str | None) -> int:
    if not paths:
        raise InputError("aggregate needs at least one results file")
    pooled: dict[str, list[tuple[float, float]]] = {}
    for p in paths:
        for variant, _, err, f1 in _read_result_rows(Path(p)):
            pooled.setdefault(variant, []).append((err, f1))
    if not pooled:
        raise InputError("no result rows found in the given files")
    rows = _table_rows(pooled, {})
    rendered = _render_table(rows)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "aggregate.tsv").write_text(rendered, encoding="utf-8")
    sys.stdout.write(rendered)
    return EXIT_OK


def cmd_gradcheck() -> int:
    start = time.perf_counter()
    results = run_checks()
    print(format_report(results))
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gclm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True, workers=True):
        p.add_argument("--config", metavar="PATH", help="INI run configuration")
        p.add_argument("--out", metavar="DIR", help=f"output directory (env {C.OUT_ENV} also works)")
        if seeds:
            p.add_argument("--seeds", metavar="LIST", help="e.g. 0-9 or 0,3,7")
        if workers:
            p.add_argument("--workers", metavar="N", type=int, help="parallel runs (0 = all cores)")

    common(sub.add_parser("gen-data", help="write a synthetic corpus and its manifest"), False, False)
    common(sub.add_parser("train", help="train one architecture over the seed list"))
    common(sub.add_parser("grid", help="run the ablation grid and print the results table"))
    sub.add_parser("gradcheck", help="finite-difference check of every op and model")
    agg = sub.add_parser("aggregate", help="merge results files into one table")
    agg.add_argument("files", nargs="*", metavar="RESULTS")
    agg.add_argument("--out", metavar="DIR")
    sub.add_parser("show-config", help="print the effective configuration").add_argument("--config")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "aggregate":
            return cmd_aggregate(args.files, args.out)
        cfg = C.load(getattr(args, "config", None))
        seeds = C.parse_seeds(args.seeds) if getattr(args, "seeds", None) else None
        cfg = cfg.with_overrides(getattr(args, "out", None), seeds, getattr(args, "workers", None)).validate()
        if args.command == "show-config":
            sys.stdout.write(C.serialize(cfg))
            return EXIT_OK
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if cfg.corpus.path and not Path(cfg.corpus.path).exists():
            raise InputError(f"corpus file {cfg.corpus.path} does not exist")
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_grid(cfg)
    except (C.ConfigError, InputError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
