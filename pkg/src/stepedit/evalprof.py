"""Editing metrics, the five-category training profiler, and report files.

Two metric styles:

* ``argmax_exact``: greedy decoding must reproduce the target exactly.
* ``prob_compare``: the target must be strictly more probable than a foil
  (the old answer for efficacy/generalization, the new answer for
  specificity).  Sequence probabilities are teacher-forced products of
  per-position softmax probabilities; ties count as failures.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from stepedit import toylm
from stepedit.errors import ContractError, NumericError
from stepedit.metatrain import CATEGORIES

STYLES = ("argmax_exact", "prob_compare")
METRICS_COLUMNS = ("run_id", "mode", "S", "eff", "gen", "spe", "n", "style", "seed", "config_hash")
PROFILE_COLUMNS = ("run_id", "category", "mean_s", "iters", "seed", "config_hash")


class MeasurementError(NumericError):
    """The clock went backwards or sections overlapped."""


@dataclass
class EditMetrics:
    efficacy: float
    generalization: float
    specificity: float
    style: str
    n_evaluated: int

    def __post_init__(self):
        if self.style not in STYLES:
            raise ContractError(f"unknown metric style {self.style!r}")
        if self.n_evaluated < 1:
            raise ContractError("n_evaluated must be >= 1")
        for name in ("efficacy", "generalization", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")

    @classmethod
    def from_counts(cls, counts: dict, style: str) -> "EditMetrics":
        frac = lambda a, b: a / b if b else 0.0
        return cls(frac(*counts["eff"]), frac(*counts["gen"]), frac(*counts["spe"]), style, counts["n"])


def _weights(model_or_weights):
    if isinstance(model_or_weights, toylm.ToyModel):
        return model_or_weights.weights, model_or_weights.config
    raise ContractError("expected a ToyModel")


def sequence_logprobs(weights: dict, config: toylm.ModelConfig, pairs: Sequence) -> np.ndarray:
    """``log P(y | x)`` for each pair, teacher-forced."""
    enc = toylm.encode_pairs(pairs, config.vocab_size)
    logp = toylm.log_softmax(toylm.logits_for(weights, config, enc.mix))
    per_row = logp[np.arange(enc.n_rows), enc.targets]
    out = np.zeros(len(pairs))
    np.add.at(out, enc.owner, per_row)
    return out


def _argmax_counts(weights, config, samples) -> dict:
    edit = [s.edit for s in samples]
    eq = [p for s in samples for p in s.equivalents]
    un = [p for s in samples for p in s.unrelated]
    ok_e = toylm.batch_decode(weights, config, edit)
    ok_g = toylm.batch_decode(weights, config, eq)
    ok_s = toylm.batch_decode(weights, config, un)
    return {"eff": (int(ok_e.sum()), len(edit)), "gen": (int(ok_g.sum()), len(eq)),
            "spe": (int(ok_s.sum()), len(un)), "n": len(samples)}


def _prob_counts(weights, config, samples) -> dict:
    new_e = [s.edit for s in samples]
    old_e = [(s.x, s.old_answer) for s in samples]
    new_g = [p for s in samples for p in s.equivalents]
    old_g = [(xe, s.old_answer) for s in samples for xe, _ in s.equivalents]
    true_u = [p for s in samples for p in s.unrelated]
    foil_u = [(xu, s.y) for s in samples for xu, _ in s.unrelated]
    lp = lambda pairs: sequence_logprobs(weights, config, pairs)
    ok_e = lp(new_e) > lp(old_e)
    ok_g = lp(new_g) > lp(old_g)
    ok_s = lp(true_u) > lp(foil_u)
    return {"eff": (int(ok_e.sum()), len(new_e)), "gen": (int(ok_g.sum()), len(new_g)),
            "spe": (int(ok_s.sum()), len(true_u)), "n": len(samples)}


def _counts(weights, config, samples, style) -> dict:
    if len(samples) == 0:
        raise ContractError("need at least one sample to evaluate")
    if style == "argmax_exact":
        return _argmax_counts(weights, config, samples)
    if style == "prob_compare":
        return _prob_counts(weights, config, samples)
    raise ContractError(f"unknown metric style {style!r}")


def eval_argmax(model: toylm.ToyModel, samples: Sequence) -> EditMetrics:
    w, cfg = _weights(model)
    return EditMetrics.from_counts(_counts(w, cfg, samples, "argmax_exact"), "argmax_exact")


def eval_prob_compare(model: toylm.ToyModel, samples: Sequence) -> EditMetrics:
    w, cfg = _weights(model)
    return EditMetrics.from_counts(_counts(w, cfg, samples, "prob_compare"), "prob_compare")


def evaluate(model: toylm.ToyModel, samples: Sequence, style: str = "argmax_exact") -> EditMetrics:
    return eval_argmax(model, samples) if style == "argmax_exact" else eval_prob_compare(model, samples)


def _merge(acc: dict, c: dict) -> None:
    for k in ("eff", "gen", "spe"):
        a, b = acc.get(k, (0, 0))
        acc[k] = (a + c[k][0], b + c[k][1])
    acc["n"] = acc.get("n", 0) + c["n"]


def edit_and_evaluate(model: toylm.ToyModel, hypernets, samples: Sequence, *, batch_size: int, S: int,
                      aggregation: str, lr: float, sequential: bool = False,
                      styles: Sequence[str] = STYLES) -> dict[str, EditMetrics]:
    """Edit held-out ``samples`` batch by batch and score them.

    Batch scenario: each batch is edited from the pre-edit weights and scored
    right away.  Sequential scenario: batches are applied cumulatively and
    every sample is scored on the final weights.
    """
    from stepedit.editengine import mbps_edit

    batches = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
    acc = {s: {} for s in styles}
    work = model.copy()
    for batch in batches:
        if not sequential:
            work = model.copy()
        mbps_edit(work, batch, hypernets, S=S, aggregation=aggregation, lr=lr)
        if not sequential:
            for st in styles:
                _merge(acc[st], _counts(work.weights, work.config, batch, st))
    if sequential:
        for st in styles:
            _merge(acc[st], _counts(work.weights, work.config, list(samples), st))
    return {st: EditMetrics.from_counts(acc[st], st) for st in styles}


# --------------------------------------------------------------------------
# profiling
# --------------------------------------------------------------------------

class SectionTimer:
    """Accumulates monotonic-clock time per named section; sections may not nest."""

    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)
        self._open: str | None = None

    @contextmanager
    def section(self, name):
        if self._open is not None:
            raise MeasurementError(f"section {name!r} opened inside {self._open!r}")
        self._open = name
        start = time.perf_counter()
        try:
            yield
        finally:
            end = time.perf_counter()
            self._open = None
            if end < start:
                raise MeasurementError("monotonic clock went backwards")
            self.totals[name] += end - start

    def reset(self):
        self.totals = defaultdict(float)


@dataclass
class TimingProfile:
    mean_s: dict
    iterations: int
    wall_mean_s: float
    residual_mean_s: float
    per_iteration_wall_s: list = field(default_factory=list, repr=False)

    @property
    def category_sum_s(self) -> float:
        return float(sum(self.mean_s.values()))

    @property
    def coverage(self) -> float:
        return self.category_sum_s / self.wall_mean_s if self.wall_mean_s > 0 else 0.0

    @property
    def residual_fraction(self) -> float:
        return self.residual_mean_s / self.wall_mean_s if self.wall_mean_s > 0 else 0.0

    def share(self, category: str) -> float:
        return self.mean_s[category] / self.wall_mean_s if self.wall_mean_s > 0 else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("per_iteration_wall_s")
        d["coverage"] = self.coverage
        return d


def profile_iteration(trainer, iterations: int = 10, warmup: int = 3) -> TimingProfile:
    """Mean seconds per category over ``iterations`` after ``warmup`` untimed ones."""
    return profile_interleaved([trainer], iterations, warmup)[0]


def profile_interleaved(trainers: Sequence, iterations: int = 10, warmup: int = 3) -> list[TimingProfile]:
    """Profile several trainers round-robin, one iteration each per round.

    Interleaving exposes every trainer to the same machine conditions, so slow
    drifts in clock speed or background load do not bias a comparison.
    """
    if iterations < 10:
        raise ContractError("profile needs at least 10 measured iterations")
    if not trainers:
        raise ContractError("profile needs at least one trainer")
    for _ in range(warmup):
        for tr in trainers:
            tr.run_iteration()
    timer = SectionTimer()
    sums = [{c: 0.0 for c in CATEGORIES} for _ in trainers]
    walls = [[] for _ in trainers]
    for _ in range(iterations):
        for i, tr in enumerate(trainers):
            timer.reset()
            start = time.perf_counter()
            tr.run_iteration(timer)
            wall = time.perf_counter() - start
            if wall < 0:
                raise MeasurementError("monotonic clock went backwards")
            unknown = set(timer.totals) - set(CATEGORIES)
            if unknown:
                raise MeasurementError(f"unattributed sections {sorted(unknown)}")
            for c in CATEGORIES:
                sums[i][c] += timer.totals.get(c, 0.0)
            walls[i].append(wall)
    out = []
    for s, w in zip(sums, walls):
        means = {c: s[c] / iterations for c in CATEGORIES}
        wall_mean = float(np.mean(w))
        residual = max(wall_mean - sum(means.values()), 0.0)
        out.append(TimingProfile(means, iterations, wall_mean, residual, w))
    return out


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    import hashlib

    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def metrics_rows(run_id: str, mode: str, S: int, metrics: EditMetrics, seed: int, chash: str) -> dict:
    return {"run_id": run_id, "mode": mode, "S": S, "eff": metrics.efficacy,
            "gen": metrics.generalization, "spe": metrics.specificity, "n": metrics.n_evaluated,
            "style": metrics.style, "seed": seed, "config_hash": chash}


def profile_rows(run_id: str, profile: TimingProfile, seed: int, chash: str) -> list[dict]:
    return [{"run_id": run_id, "category": c, "mean_s": profile.mean_s[c], "iters": profile.iterations,
             "seed": seed, "config_hash": chash} for c in CATEGORIES]


def _csv_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return "" if v is None else v


def emit_report(out_dir, *, metrics: Sequence[dict] = (), profiles: Sequence[dict] = (),
                logs: Sequence[dict] | None = None, meta: dict | None = None,
                formats: Sequence[str] = ("csv", "json")) -> dict[str, Path]:
    """Write ``metrics.csv``, ``profile.csv``, ``train_log.jsonl`` and ``report.json``.

    ``metrics``/``profiles`` are row dicts (see :func:`metrics_rows` and
    :func:`profile_rows`).  At least one input must be given.
    """
    if not metrics and not profiles and not logs and not meta:
        raise ContractError("emit_report needs at least one input")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = {}
    if "csv" in formats:
        written["metrics.csv"] = out / "metrics.csv"
        written["metrics.csv"].write_text(_csv_text(metrics, METRICS_COLUMNS))
        if profiles:
            written["profile.csv"] = out / "profile.csv"
            written["profile.csv"].write_text(_csv_text(profiles, PROFILE_COLUMNS))
    if logs is not None:
        written["train_log.jsonl"] = out / "train_log.jsonl"
        written["train_log.jsonl"].write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in logs))
    if "json" in formats:
        doc = {"meta": meta or {}, "metrics": list(metrics), "profiles": list(profiles)}
        written["report.json"] = out / "report.json"
        written["report.json"].write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return written


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
