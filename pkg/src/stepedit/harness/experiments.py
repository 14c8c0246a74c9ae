"""Canned experiments shared by the CLI and the acceptance suite.

Every function is a pure function of ``(ExperimentConfig, seed)``: the
corpus, the pretrained base model, the hypernetwork initialisation and the
training order are all derived from the seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

from stepedit import evalprof as ep
from stepedit import factsynth as fs
from stepedit import toylm
from stepedit.errors import NumericError, PreconditionError
from stepedit.harness.config import ExperimentConfig
from stepedit.metatrain import Trainer

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    seed: int
    corpus: fs.EditCorpus
    model: toylm.ToyModel
    fit: toylm.FitReport | None
    n_train: int

    @property
    def train(self):
        return self.corpus.samples[: self.n_train]

    @property
    def test(self):
        return self.corpus.samples[self.n_train:]


def pretrain(cfg: ExperimentConfig, corpus: fs.EditCorpus, seed: int) -> tuple[toylm.ToyModel, toylm.FitReport]:
    model = toylm.ToyModel.init(cfg.model(), seed)
    report = toylm.fit(model, fs.pretrain_corpus(corpus), steps=cfg.pretrain_steps, lr=cfg.pretrain_lr)
    return model, report


def check_unedited(cfg: ExperimentConfig, model: toylm.ToyModel, samples) -> dict[str, ep.EditMetrics]:
    """Both metric styles on the unedited model; raises if specificity is below the floor."""
    out = {st: ep.evaluate(model, samples, st) for st in ep.STYLES}
    for st, m in out.items():
        if m.specificity < cfg.min_specificity:
            raise PreconditionError(
                f"unedited specificity {m.specificity:.3f} < {cfg.min_specificity} ({st}); "
                "pretraining did not fit the corpus, raise pretrain_steps")
    return out


def base_path(root: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return Path(root) / "models" / f"base_s{seed}_{ep.config_hash(cfg.base_key())}.npz"


def prepare(cfg: ExperimentConfig, seed: int, cache_dir: Path | None = None, check: bool = True) -> Prepared:
    """Corpus plus pretrained base model for ``seed``; reuses a cached base model when present."""
    corpus = fs.generate_corpus(cfg.corpus(seed))
    fit = None
    path = base_path(cache_dir, cfg, seed) if cache_dir is not None else None
    if path is not None and path.exists():
        model = toylm.ToyModel.load(path)
    else:
        model, fit = pretrain(cfg, corpus, seed)
        if path is not None:
            model.save(path)
    if check:
        check_unedited(cfg, model, corpus.samples)
    return Prepared(seed, corpus, model, fit, cfg.n_train)


def run_id(cfg: ExperimentConfig, seed: int, **kw) -> str:
    mode = kw.get("mode", cfg.mode)
    S = kw.get("S", cfg.S)
    it = kw.get("iterations", cfg.iterations)
    return f"{mode}-S{S}-it{it}-s{seed}-{cfg.hash()}"


def train(cfg: ExperimentConfig, prep: Prepared, **overrides) -> Trainer:
    tr = Trainer(cfg.trainer(prep.seed, **overrides), prep.model, prep.train)
    tr.run()
    return tr


def evaluate_trained(cfg: ExperimentConfig, prep: Prepared, trainer: Trainer) -> dict[str, ep.EditMetrics]:
    tc = trainer.config
    return ep.edit_and_evaluate(prep.model, trainer.hypernets, prep.test, batch_size=tc.batch_size,
                                S=tc.S, aggregation=tc.aggregation, lr=tc.inner_lr,
                                sequential=tc.sequential)


def train_and_eval(cfg: ExperimentConfig, prep: Prepared, **overrides) -> tuple[Trainer, list[dict]]:
    """Train one configuration and return metrics rows for both styles."""
    tr = train(cfg, prep, **overrides)
    metrics = evaluate_trained(cfg, prep, tr)
    rid = run_id(cfg, prep.seed, **overrides)
    chash = ep.config_hash({**cfg.to_json(), **overrides, "seed": prep.seed})
    rows = [ep.metrics_rows(rid, tr.config.mode, tr.config.S, m, prep.seed, chash) for m in metrics.values()]
    for r in rows:
        r["iterations"] = tr.config.iterations
    return tr, rows


def step_sweep(cfg: ExperimentConfig, seeds=None, steps=None, cache_dir=None, on_row=None) -> list[dict]:
    """Train and evaluate for every ``S`` in ``steps``; one metrics row per (seed, S, style).

    A non-finite collapse at some ``S`` stops the sweep with :class:`NumericError`
    after the rows gathered so far were handed to ``on_row``.
    """
    rows = []
    for seed in seeds or cfg.seeds:
        prep = prepare(cfg, seed, cache_dir)
        for S in steps or cfg.sweep_steps:
            try:
                _, got = train_and_eval(cfg, prep, S=S)
            except NumericError as exc:
                raise NumericError(f"seed {seed}, S={S}: editing collapsed ({exc})") from exc
            for r in got:
                rows.append(r)
                if on_row:
                    on_row(r)
    return rows


def scarcity_sweep(cfg: ExperimentConfig, seeds=None, iterations=None, modes=("baseline_kl", "smedit_batch"),
                   cache_dir=None, on_row=None) -> list[dict]:
    """Efficacy as a function of the number of meta-training iterations."""
    rows = []
    for seed in seeds or cfg.seeds:
        prep = prepare(cfg, seed, cache_dir)
        for mode in modes:
            S = 1 if mode == "baseline_kl" else cfg.S
            for it in iterations or cfg.sweep_iterations:
                _, got = train_and_eval(cfg, prep, mode=mode, S=S, iterations=it)
                for r in got:
                    rows.append(r)
                    if on_row:
                        on_row(r)
    return rows


def profile(cfg: ExperimentConfig, prep: Prepared, mode: str | None = None, S: int | None = None,
            iterations: int | None = None) -> ep.TimingProfile:
    mode = mode or cfg.mode
    S = S if S is not None else (1 if mode == "baseline_kl" else cfg.S)
    tr = Trainer(cfg.trainer(prep.seed, mode=mode, S=S), prep.model, prep.train)
    return ep.profile_iteration(tr, iterations or cfg.profile_iters)


def profile_modes(cfg: ExperimentConfig, prep: Prepared, modes, S: int = 1,
                  iterations: int | None = None) -> dict[str, ep.TimingProfile]:
    """Interleaved profiles of several modes at identical shapes and step count."""
    trainers = [Trainer(cfg.trainer(prep.seed, mode=m, S=S), prep.model, prep.train) for m in modes]
    profs = ep.profile_interleaved(trainers, iterations or cfg.profile_iters)
    return dict(zip(modes, profs))


def mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else float("nan")


# --------------------------------------------------------------------------
# comparison tables
# --------------------------------------------------------------------------

KEY = ("mode", "S", "seed")
VALUE_COLUMNS = ("eff", "gen", "spe", "n")


def compare(paths, style: str = "argmax_exact") -> tuple[list[str], list[dict]]:
    """Join metrics CSVs on ``(mode, S, seed)``.

    Value columns are prefixed by a per-file label: the file stem, or the
    parent directory name when stems collide (every report is ``metrics.csv``).
    """
    paths = [Path(p) for p in paths]
    stems = [p.stem for p in paths]
    labels, tables = [], []
    for i, p in enumerate(paths):
        label = p.stem if stems.count(p.stem) == 1 else p.parent.name or p.stem
        if label in labels:
            label = f"{label}_{i}"
        labels.append(label)
        table = {}
        for r in ep.read_csv(p):
            if r.get("style", style) != style:
                continue
            key = tuple(r[k] for k in KEY)
            table[key] = r
        tables.append(table)
    keys = sorted(set().union(*[t.keys() for t in tables]) if tables else set(),
                  key=lambda k: (k[0], int(k[1]), int(k[2])))
    columns = list(KEY) + [f"{lab}.{c}" for lab in labels for c in VALUE_COLUMNS]
    rows = []
    for key in keys:
        row = dict(zip(KEY, key))
        for lab, t in zip(labels, tables):
            src = t.get(key, {})
            for c in VALUE_COLUMNS:
                row[f"{lab}.{c}"] = src.get(c, "")
        rows.append(row)
    return columns, rows
