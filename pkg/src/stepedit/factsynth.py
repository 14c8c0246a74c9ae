"""Synthetic fact-editing corpus over integer tokens.

A fact maps ``(subject, relation)`` to an object token.  The vocabulary is
partitioned into relation, filler, object and subject tokens; subjects are
further split into an *edit* pool and a disjoint *unrelated* pool so that
specificity prompts never share a subject with any edited fact.

Prompts are rendered from templates.  Template 0 is the canonical edit prompt;
the others substitute or add filler tokens around the same subject and act as
paraphrases.  A template is a sequence of slots: ``"S"`` (subject), ``"R"``
(relation) or an integer filler index.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from stepedit.errors import CapacityError, ContractError, InputError
from stepedit.numcore import seeded_rng

SCHEMA = "stepedit.corpus"
SCHEMA_VERSION = 1

Tokens = tuple[int, ...]
Pair = tuple[Tokens, Tokens]

DEFAULT_TEMPLATES: tuple[tuple, ...] = (
    (0, "S", "R"),
    (1, "S", "R"),
    (2, 3, "S", "R"),
    ("S", 4, "R"),
    (5, "S", 1, "R"),
)


@dataclass(frozen=True)
class CorpusConfig:
    n: int = 200
    m: int = 2
    p: int = 2
    vocab_size: int = 64
    seed: int = 0
    n_relations: int = 6
    n_fillers: int = 6
    n_objects: int = 10
    n_unrelated_subjects: int = 8
    templates: tuple[tuple, ...] = DEFAULT_TEMPLATES

    def to_json(self) -> dict:
        d = asdict(self)
        d["templates"] = [list(t) for t in self.templates]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        d["templates"] = tuple(tuple(t) for t in d["templates"])
        return cls(**d)


@dataclass(frozen=True)
class TokenLayout:
    relations: tuple[int, ...]
    fillers: tuple[int, ...]
    objects: tuple[int, ...]
    edit_subjects: tuple[int, ...]
    unrelated_subjects: tuple[int, ...]

    @classmethod
    def for_config(cls, cfg: CorpusConfig) -> "TokenLayout":
        sizes = [cfg.n_relations, cfg.n_fillers, cfg.n_objects, cfg.n_unrelated_subjects]
        if min(sizes) < 1 or cfg.n_objects < 2:
            raise CapacityError("need >=1 relation, filler and unrelated subject, and >=2 objects")
        used = sum(sizes)
        if used >= cfg.vocab_size:
            raise CapacityError(f"vocab {cfg.vocab_size} leaves no room for edit subjects")
        start = 0
        blocks = []
        for size in sizes:
            blocks.append(tuple(range(start, start + size)))
            start += size
        rel, fil, obj, unrel = blocks
        edit = tuple(range(start, cfg.vocab_size))
        return cls(rel, fil, obj, edit, unrel)


@dataclass(frozen=True)
class EditSample:
    """One editing task: the edit pair, paraphrases, unrelated pairs, and the pre-edit answer."""

    edit: Pair
    equivalents: tuple[Pair, ...]
    unrelated: tuple[Pair, ...]
    old_answer: Tokens

    def __post_init__(self):
        if len(self.equivalents) < 1 or len(self.unrelated) < 1:
            raise ContractError("an edit sample needs at least one equivalent and one unrelated pair")
        y = self.edit[1]
        if any(ye != y for _, ye in self.equivalents):
            raise ContractError("equivalent answers must equal the edit answer")
        related = {self.edit[0]} | {xe for xe, _ in self.equivalents}
        if any(xu in related for xu, _ in self.unrelated):
            raise ContractError("unrelated prompts must differ from edit and equivalent prompts")
        if any(yu == y for _, yu in self.unrelated):
            # the new answer is the foil for specificity; equal answers would always tie
            raise ContractError("unrelated answers must differ from the edit answer")

    @property
    def x(self) -> Tokens:
        return self.edit[0]

    @property
    def y(self) -> Tokens:
        return self.edit[1]

    def to_json(self) -> dict:
        pair = lambda p: {"x": list(p[0]), "y": list(p[1])}
        return {
            "edit": pair(self.edit),
            "equivalents": [pair(p) for p in self.equivalents],
            "unrelated": [pair(p) for p in self.unrelated],
            "old_answer": list(self.old_answer),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EditSample":
        pair = lambda r: (tuple(int(t) for t in r["x"]), tuple(int(t) for t in r["y"]))
        return cls(
            edit=pair(d["edit"]),
            equivalents=tuple(pair(r) for r in d["equivalents"]),
            unrelated=tuple(pair(r) for r in d["unrelated"]),
            old_answer=tuple(int(t) for t in d["old_answer"]),
        )


@dataclass
class EditCorpus:
    samples: list[EditSample]
    config: CorpusConfig
    layout: TokenLayout | None = field(default=None, compare=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices) -> "EditCorpus":
        return EditCorpus([self.samples[i] for i in indices], self.config, self.layout)

    # -- serialization ----------------------------------------------------

    def dumps(self) -> str:
        header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "config": self.config.to_json(),
                  "n_samples": len(self.samples)}
        lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(s.to_json(), sort_keys=True, separators=(",", ":")) for s in self.samples]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "EditCorpus":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise InputError("empty corpus file")
        try:
            header = json.loads(lines[0])
            records = [json.loads(ln) for ln in lines[1:]]
        except json.JSONDecodeError as exc:
            raise InputError(f"corpus file is not valid JSON lines: {exc}") from exc
        if header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
            raise InputError(f"unsupported corpus schema {header.get('schema')}/{header.get('version')}")
        if header.get("n_samples") != len(records):
            raise InputError("corpus file is truncated")
        cfg = CorpusConfig.from_json(header["config"])
        samples = [EditSample.from_json(r) for r in records]
        return cls(samples, cfg, TokenLayout.for_config(cfg))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "EditCorpus":
        return cls.loads(Path(path).read_text())


def render(template: Sequence, subject: int, relation: int, layout: TokenLayout) -> Tokens:
    out = []
    for slot in template:
        if slot == "S":
            out.append(subject)
        elif slot == "R":
            out.append(relation)
        else:
            out.append(layout.fillers[int(slot) % len(layout.fillers)])
    return tuple(out)


def generate_corpus(config: CorpusConfig) -> EditCorpus:
    """Deterministically generate ``config.n`` edit samples."""
    if config.n < 1 or config.m < 1 or config.p < 1:
        raise ContractError("n, m and p must all be >= 1")
    if config.m > len(config.templates) - 1:
        raise CapacityError(f"m={config.m} paraphrases requested but only "
                            f"{len(config.templates) - 1} paraphrase templates exist")
    layout = TokenLayout.for_config(config)
    edit_keys = [(s, r) for s in layout.edit_subjects for r in layout.relations]
    unrel_keys = [(s, r) for s in layout.unrelated_subjects for r in layout.relations]
    if config.n > len(edit_keys):
        raise CapacityError(f"{config.n} edits requested but the vocabulary hosts only "
                            f"{len(edit_keys)} distinct (subject, relation) facts")
    if config.p > len(unrel_keys):
        raise CapacityError(f"p={config.p} exceeds the {len(unrel_keys)} unrelated facts")

    rng = seeded_rng(config.seed)
    n_obj = len(layout.objects)
    chosen = rng.choice(len(edit_keys), size=config.n, replace=False)
    truth_unrel = {k: layout.objects[int(i)] for k, i in zip(unrel_keys, rng.integers(0, n_obj, len(unrel_keys)))}
    canonical = config.templates[0]
    paraphrases = config.templates[1:]

    samples = []
    for idx in chosen:
        subj, rel = edit_keys[int(idx)]
        old = int(rng.integers(0, n_obj))
        new = (old + 1 + int(rng.integers(0, n_obj - 1))) % n_obj
        y = (layout.objects[new],)
        x = render(canonical, subj, rel, layout)
        tpl_idx = rng.choice(len(paraphrases), size=config.m, replace=False)
        equivalents = tuple((render(paraphrases[int(t)], subj, rel, layout), y) for t in sorted(tpl_idx))
        pool = [i for i, k in enumerate(unrel_keys) if truth_unrel[k] != y[0]]
        if len(pool) < config.p:
            raise CapacityError(f"only {len(pool)} unrelated facts have an answer other than the edit target")
        unrel_idx = [pool[int(i)] for i in rng.choice(len(pool), size=config.p, replace=False)]
        unrelated = tuple(
            (render(canonical, *unrel_keys[int(u)], layout), (truth_unrel[unrel_keys[int(u)]],))
            for u in unrel_idx
        )
        samples.append(EditSample((x, y), equivalents, unrelated, (layout.objects[old],)))
    return EditCorpus(samples, config, layout)


def batch_split(corpus, batch_size: int, n_batches: int) -> list[list[EditSample]]:
    """First ``batch_size * n_batches`` samples as consecutive disjoint batches."""
    samples = corpus.samples if isinstance(corpus, EditCorpus) else list(corpus)
    if batch_size < 1 or n_batches < 1:
        raise ContractError("batch_size and n_batches must be >= 1")
    if batch_size * n_batches > len(samples):
        raise CapacityError(f"{n_batches}x{batch_size} batches need {batch_size * n_batches} "
                            f"samples, corpus has {len(samples)}")
    return [samples[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]


def n_sequential_steps(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def pretrain_corpus(corpus: EditCorpus) -> list[Pair]:
    """Pairs establishing the pre-edit knowledge.

    Every edit prompt and paraphrase is paired with the *old* answer, every
    unrelated prompt with its ground truth.  Duplicates are dropped, order is
    first occurrence.
    """
    seen: dict[Tokens, Tokens] = {}
    for s in corpus.samples:
        seen.setdefault(s.x, s.old_answer)
        for xe, _ in s.equivalents:
            seen.setdefault(xe, s.old_answer)
        for xu, yu in s.unrelated:
            seen.setdefault(xu, yu)
    return list(seen.items())
