"""Experiment configuration: one flat record, presets, and a key=value file format.

File format (``.cfg``, UTF-8)::

    # comments start with '#'
    preset = trend
    mode = smedit_batch
    S = 2
    seeds = 0,1,2,3,4

Every key is a field of :class:`ExperimentConfig`.  Values are parsed by the
field's type: ints, floats, ``true``/``false``, comma-separated int lists, or
bare strings.  Unknown keys are an error.  Precedence is
``preset < file < command-line flags``; a ``preset`` key in the file selects
the base preset before the rest of the file is applied.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from stepedit.errors import ConfigError
from stepedit.factsynth import CorpusConfig
from stepedit.metatrain import TrainerConfig
from stepedit.toylm import ModelConfig

OUT_ENV = "STEPEDIT_OUT"
DEFAULT_OUT = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "trend"
    seeds: tuple[int, ...] = (0,)
    # corpus
    n: int = 200
    m: int = 2
    p: int = 2
    n_train: int = 100
    # model
    vocab_size: int = 64
    dim: int = 32
    blocks: int = 2
    hidden_mult: int = 4
    # "all" edits every block's fc_in, "last" only the final block's
    editable: str = "all"
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-2
    # trainer
    mode: str = "smedit_batch"
    S: int = 2
    eta: float = 0.5
    lambda_loc: float = 0.6
    gamma: float = 1.0
    mu: float = 0.95
    q: int = 10
    meta_lr: float = 1e-3
    inner_lr: float = 1e-2
    max_grad_norm: float = 1.0
    rank: int = 32
    hyper_blocks: int = 4
    init_lambda: float = 0.1
    aggregation: str = "least_squares"
    cons_variant: str = "total_drift"
    rank_decay: bool = True
    scenario: str = "batch"
    batch_size: int = 10
    seq_len: int = 5
    iterations: int = 100
    # sweeps and profiling
    sweep_steps: tuple[int, ...] = (1, 2, 3, 4)
    sweep_iterations: tuple[int, ...] = (10, 100)
    profile_iters: int = 20
    min_specificity: float = 0.99

    def __post_init__(self):
        if self.editable not in ("all", "last"):
            raise ConfigError("editable must be 'all' or 'last'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.n_train < self.n:
            raise ConfigError(f"n_train must be in (0, n={self.n})")
        # validate the derived configs eagerly so errors surface at parse time
        self.trainer(self.seeds[0])
        self.model()

    # -- derived configs ---------------------------------------------------

    def corpus(self, seed: int) -> CorpusConfig:
        return CorpusConfig(n=self.n, m=self.m, p=self.p, vocab_size=self.vocab_size, seed=seed)

    def model(self) -> ModelConfig:
        editable = None
        if self.editable == "last":
            editable = (f"blocks.{self.blocks - 1}.fc_in",)
        return ModelConfig(vocab_size=self.vocab_size, dim=self.dim, n_blocks=self.blocks,
                           hidden_mult=self.hidden_mult, editable=editable)

    def trainer(self, seed: int, **overrides) -> TrainerConfig:
        kw = dict(mode=self.mode, S=self.S, eta=self.eta, lambda_loc=self.lambda_loc, gamma=self.gamma,
                  mu=self.mu, q=self.q, meta_lr=self.meta_lr, inner_lr=self.inner_lr,
                  max_grad_norm=self.max_grad_norm, rank=self.rank, n_blocks=self.hyper_blocks,
                  init_lambda=self.init_lambda, aggregation=self.aggregation,
                  cons_variant=self.cons_variant, rank_decay=self.rank_decay, scenario=self.scenario,
                  batch_size=self.batch_size, seq_len=self.seq_len, iterations=self.iterations, seed=seed)
        kw.update(overrides)
        return TrainerConfig(**kw)

    def base_key(self) -> dict:
        """Fields that determine the corpus and the pretrained model."""
        keys = ("n", "m", "p", "vocab_size", "dim", "blocks", "hidden_mult", "editable",
                "pretrain_steps", "pretrain_lr")
        return {k: getattr(self, k) for k in keys}

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def dumps(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def with_values(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


PRESETS: dict[str, dict] = {
    # hyperparameter table of the method, for documentation; far too large for a desk run
    "paper": dict(rank=1024, hyper_blocks=4, inner_lr=1e-6, meta_lr=1e-5, lambda_loc=0.6,
                  max_grad_norm=1.0, eta=0.5, gamma=1.0, q=10, mu=0.95, S=2),
    # micro sizes for CI smoke runs
    "desk": dict(n=40, n_train=20, vocab_size=40, dim=8, rank=4, batch_size=5, iterations=5,
                 pretrain_steps=1500, pretrain_lr=2e-2, profile_iters=10, sweep_steps=(1, 2),
                 sweep_iterations=(2, 5)),
    # sizes of the trend experiments
    "trend": dict(seeds=(0, 1, 2, 3, 4)),
    # deeper model edited at one layer, so the edited model (not the hypernetwork) dominates cost
    "profile": dict(blocks=4, editable="last", p=4, rank=16, seeds=(0,)),
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(key: str, raw: str):
    """Convert the string ``raw`` to the type of field ``key``."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def parse_text(text: str, source: str = "<string>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def build(preset: str | None = None, file_values: dict | None = None,
          overrides: dict | None = None) -> ExperimentConfig:
    """Layer ``preset < file < overrides`` into a validated config."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    name = overrides.get("preset") or file_values.get("preset") or preset or "trend"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    values.update(file_values)
    values.update(overrides)
    values["preset"] = name
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build(file_values=parse_text(text, str(path)), overrides=overrides)


def output_root(explicit: str | None = None) -> Path:
    return Path(explicit or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def field_names() -> list[str]:
    return list(_FIELDS)
