"""Run configuration: a flat INI file with one section per concern.

Unknown sections or keys are rejected, and ``parse(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from .data import SyntheticConfig
from .fusion import ArchitectureSpec, ModelConfig, table_variants
from .train import TrainConfig

OUT_ENV = "GCLM_OUT"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class CorpusSource:
    path: str = ""                  # empty: use the synthetic generator
    synthetic: SyntheticConfig = SyntheticConfig()


@dataclass(frozen=True)
class RunSettings:
    seeds: tuple[int, ...] = tuple(range(10))
    out: str = "runs"
    workers: int = 0                # 0: one per available core
    variants: tuple[str, ...] = ("table",)


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSource = CorpusSource()
    architecture: ArchitectureSpec = ArchitectureSpec()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    run: RunSettings = RunSettings()

    def validate(self) -> "RunConfig":
        try:
            self.corpus.synthetic.validate()
            self.architecture.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        m, t, r = self.model, self.train, self.run
        if m.d % m.heads:
            raise ConfigError(f"model.heads={m.heads} must divide model.d={m.d}")
        if min(m.d, m.layers, m.heads, m.ff, m.max_len) < 1 or m.max_len < 3:
            raise ConfigError("model sizes must be positive and max_len >= 3")
        for name in ("lm_dropout", "gnn_dropout"):
            if not 0.0 <= getattr(m, name) < 1.0:
                raise ConfigError(f"model.{name} must lie in [0, 1)")
        if min(t.batch_size, t.max_epochs, t.patience) < 1 or t.lr <= 0 or t.lr_lm <= 0:
            raise ConfigError("batch_size, max_epochs, patience and learning rates must be positive")
        if not r.seeds:
            raise ConfigError("at least one seed is required")
        if r.workers < 0:
            raise ConfigError("workers must be >= 0")
        self.grid()
        return self

    def grid(self) -> list[ArchitectureSpec]:
        """Variants named in ``run.variants``; 'table' expands to every results-table row."""
        known = {v.slug: v for v in table_variants()}
        out: list[ArchitectureSpec] = []
        for name in self.run.variants:
            if name == "table":
                out.extend(table_variants())
            elif name in known:
                out.append(known[name])
            else:
                raise ConfigError(f"unknown grid variant {name!r}")
        return out

    def with_overrides(self, out: str | None = None, seeds=None, workers: int | None = None) -> "RunConfig":
        run = self.run
        env_out = os.environ.get(OUT_ENV)
        if out is None and env_out:
            out = env_out
        run = dataclasses.replace(
            run,
            out=out if out is not None else run.out,
            seeds=tuple(seeds) if seeds is not None else run.seeds,
            workers=workers if workers is not None else run.workers,
        )
        return dataclasses.replace(self, run=run)

    def content_hash(self) -> str:
        """Hash of everything that affects results (output location and worker count excluded)."""
        text = serialize(dataclasses.replace(self, run=dataclasses.replace(self.run, out="", workers=0)))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# section name -> (attribute path on RunConfig, dataclass type)
_SECTIONS = {
    "corpus": (("corpus",), CorpusSource),
    "synthetic": (("corpus", "synthetic"), SyntheticConfig),
    "architecture": (("architecture",), ArchitectureSpec),
    "model": (("model",), ModelConfig),
    "train": (("train",), TrainConfig),
    "run": (("run",), RunSettings),
}


def parse_seeds(text: str) -> tuple[int, ...]:
    """'0-9', '1,3,5' or a mix such as '0-2,7'."""
    seeds: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list element {part!r}") from None
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds must be non-negative")
    return tuple(seeds)


def _scalar_fields(cls) -> dict[str, type]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if not dataclasses.is_dataclass(hints[f.name])}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _convert(section: str, key: str, kind, raw: str):
    raw = raw.strip()
    text = str(kind)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if "None" in text:            # optional int
            return None if raw == "" else int(raw)
        if key == "seeds":
            return parse_seeds(raw)
        if "int" in text:             # tuple[int, ...]
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {getattr(kind, '__name__', text)}") from None


def serialize(cfg: RunConfig) -> str:
    lines = []
    for section, (attr_path, cls) in _SECTIONS.items():
        obj = cfg
        for a in attr_path:
            obj = getattr(obj, a)
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_format(getattr(obj, k))}" for k in _scalar_fields(cls))
        lines.append("")
    return "\n".join(lines)


def parse(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}; expected {list(_SECTIONS)}")
    values: dict[str, dict] = {}
    for section, (_, cls) in _SECTIONS.items():
        scalars = _scalar_fields(cls)
        given = dict(parser[section]) if parser.has_section(section) else {}
        extra = sorted(set(given) - set(scalars))
        if extra:
            raise ConfigError(f"{source}: unknown key(s) {extra} in [{section}]")
        values[section] = {k: _convert(section, k, scalars[k], v) for k, v in given.items()}
    try:
        synthetic = SyntheticConfig(**values["synthetic"])
        corpus = CorpusSource(synthetic=synthetic, **values["corpus"])
        cfg = RunConfig(
            corpus=corpus,
            architecture=ArchitectureSpec(**values["architecture"]),
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"]),
            run=RunSettings(**values["run"]),
        )
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse(text, str(p))
