"""A tiny editable language model over integer tokens.

Architecture: token embedding, a causal bag-of-tokens context (the hidden
state at position ``t`` is the mean embedding of tokens ``0..t``), ``n_blocks``
residual feed-forward blocks ``h + fc_out(gelu(fc_in(h)))``, and an output
projection tied to the embedding.  There is no attention; the averaging
context is what lets a prompt's last position see the subject tokens.

Weights live in a plain ``dict[str, ndarray]``.  Forward passes are written
against a :class:`~stepedit.numcore.Tape` so that any subset of the weights can
be leaves (for pretraining, trace capture, or meta-gradients).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from stepedit import numcore as nc
from stepedit.errors import ContractError, InputError, NumericError
from stepedit.store import load_arrays, save_arrays

CHECKPOINT_KIND = "stepedit.toylm"
CHECKPOINT_VERSION = 1

Pair = tuple[Sequence[int], Sequence[int]]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    dim: int = 32
    n_blocks: int = 2
    hidden_mult: int = 4
    # None means "fc_in of every block"
    editable: tuple[str, ...] | None = None

    def editable_set(self) -> tuple[str, ...]:
        if self.editable is not None:
            return tuple(self.editable)
        return tuple(f"blocks.{i}.fc_in" for i in range(self.n_blocks))


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    shapes = {"embed": (cfg.vocab_size, cfg.dim)}
    hidden = cfg.hidden_mult * cfg.dim
    for i in range(cfg.n_blocks):
        shapes[f"blocks.{i}.fc_in"] = (hidden, cfg.dim)
        shapes[f"blocks.{i}.fc_out"] = (cfg.dim, hidden)
    return shapes


@dataclass(frozen=True)
class WeightSnapshot:
    """Read-only copy of the editable weights, labelled with a tag such as ``"W0"``."""

    weights: dict
    tag: str = ""

    @classmethod
    def take(cls, weights: dict, keys: Iterable[str], tag: str = "") -> "WeightSnapshot":
        frozen = {}
        for k in keys:
            arr = np.array(weights[k], copy=True)
            arr.setflags(write=False)
            frozen[k] = arr
        return cls(frozen, tag)

    def keys(self):
        return self.weights.keys()

    def __getitem__(self, key):
        return self.weights[key]

    def equals(self, other: "WeightSnapshot") -> bool:
        return self.weights.keys() == other.weights.keys() and all(
            np.array_equal(self.weights[k], other.weights[k]) for k in self.weights
        )


@dataclass
class ToyModel:
    config: ModelConfig
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = weight_shapes(self.config)
        missing = set(shapes) - set(self.weights)
        if missing and self.weights:
            raise ContractError(f"weights missing for {sorted(missing)}")
        for name, shape in shapes.items():
            if name in self.weights and self.weights[name].shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {self.weights[name].shape}")
        unknown = set(self.config.editable_set()) - set(shapes)
        if unknown:
            raise ContractError(f"editable layers {sorted(unknown)} are not model weights")

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ToyModel":
        rng = nc.seeded_rng(seed)
        weights = {}
        for name, (rows, cols) in weight_shapes(config).items():
            std = 1.0 if name == "embed" else 1.0 / np.sqrt(cols)
            weights[name] = rng.normal(0.0, std, size=(rows, cols))
        return cls(config, weights)

    @property
    def editable_set(self) -> tuple[str, ...]:
        return self.config.editable_set()

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def copy(self) -> "ToyModel":
        return ToyModel(self.config, {k: v.copy() for k, v in self.weights.items()})

    def snapshot(self, tag: str = "") -> WeightSnapshot:
        return WeightSnapshot.take(self.weights, self.editable_set, tag)

    def restore(self, snap: WeightSnapshot) -> None:
        if set(snap.keys()) != set(self.editable_set):
            raise ContractError(
                f"snapshot keys {sorted(snap.keys())} do not match editable set {sorted(self.editable_set)}"
            )
        for k in snap.keys():
            self.weights[k] = np.array(snap[k], copy=True)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k]).tobytes())
        return h.hexdigest()[:16]

    # -- persistence ----------------------------------------------------

    def save(self, path):
        header = {"kind": CHECKPOINT_KIND, "version": CHECKPOINT_VERSION,
                  "config": _config_to_json(self.config)}
        return save_arrays(path, header, self.weights)

    @classmethod
    def load(cls, path) -> "ToyModel":
        header, arrays = load_arrays(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
        return cls(_config_from_json(header["config"]), arrays)


def _config_to_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["editable"] = list(cfg.editable) if cfg.editable is not None else None
    return d


def _config_from_json(d: dict) -> ModelConfig:
    d = dict(d)
    if d.get("editable") is not None:
        d["editable"] = tuple(d["editable"])
    return ModelConfig(**d)


# --------------------------------------------------------------------------
# encoding prompts
# --------------------------------------------------------------------------

def check_tokens(tokens: Sequence[int], vocab_size: int) -> None:
    for t in tokens:
        if not (0 <= int(t) < vocab_size):
            raise InputError(f"token {t} outside vocabulary of size {vocab_size}")


def context_matrix(sequences: Sequence[Sequence[int]], positions: Sequence[tuple[int, int]],
                   vocab_size: int) -> np.ndarray:
    """Row ``r`` holds the averaged one-hot counts of ``sequences[i][:p + 1]`` for ``positions[r] = (i, p)``.

    Multiplying by the embedding gives the causal bag-of-tokens context.
    """
    mix = np.zeros((len(positions), vocab_size))
    for r, (i, p) in enumerate(positions):
        seq = sequences[i]
        w = 1.0 / (p + 1)
        for tok in seq[: p + 1]:
            mix[r, tok] += w
    return mix


@dataclass
class EncodedPairs:
    """Teacher-forced rows for a list of (prompt, answer) pairs.

    ``owner[r]`` is the pair index of row ``r``; ``targets[r]`` the answer token
    predicted at that row.
    """

    mix: np.ndarray
    targets: np.ndarray
    owner: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.targets.shape[0]


def encode_pairs(pairs: Sequence[Pair], vocab_size: int) -> EncodedPairs:
    seqs, positions, targets, owner = [], [], [], []
    for i, (x, y) in enumerate(pairs):
        if len(x) == 0 or len(y) == 0:
            raise InputError("prompts and answers must be non-empty")
        check_tokens(x, vocab_size)
        check_tokens(y, vocab_size)
        seqs.append(list(x) + list(y[:-1]))
        for j, tok in enumerate(y):
            positions.append((i, len(x) - 1 + j))
            targets.append(int(tok))
            owner.append(i)
    mix = context_matrix(seqs, positions, vocab_size)
    return EncodedPairs(mix, np.asarray(targets, dtype=np.intp), np.asarray(owner, dtype=np.intp))


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def forward_rows(tape: nc.Tape, nodes: dict, mix, config: ModelConfig, record: bool = True) -> nc.Node:
    """Logits for the context rows in ``mix``.

    ``nodes`` maps every weight name to a tape node.  With ``record`` each
    linear layer is traced under its weight name.
    """
    embed = nodes["embed"]
    h = nc.matmul(tape.wrap(mix), embed)
    for i in range(config.n_blocks):
        name_in, name_out = f"blocks.{i}.fc_in", f"blocks.{i}.fc_out"
        z = nc.linear(nodes[name_in], h, name_in if record else None)
        a = nc.gelu(z)
        h = h + nc.linear(nodes[name_out], a, name_out if record else None)
    return nc.matmul(h, embed, transpose_b=True)


def weight_nodes(tape: nc.Tape, weights: dict, trainable: Iterable[str] = ()) -> dict:
    """Put ``weights`` on ``tape``; names in ``trainable`` become parameters."""
    trainable = set(trainable)
    return {k: (tape.param(v, k) if k in trainable else tape.const(v)) for k, v in weights.items()}


def logits_for(weights: dict, config: ModelConfig, mix) -> np.ndarray:
    tape = nc.Tape()
    return forward_rows(tape, weight_nodes(tape, weights), mix, config, record=False).value


def model_forward(model: ToyModel, tokens: Sequence[int]) -> np.ndarray:
    """Logits (positions x vocab) for every position of ``tokens``."""
    if len(tokens) == 0:
        raise InputError("empty token sequence")
    check_tokens(tokens, model.vocab_size)
    mix = context_matrix([list(tokens)], [(0, p) for p in range(len(tokens))], model.vocab_size)
    out = logits_for(model.weights, model.config, mix)
    nc.check_finite("logits", out)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_loss(logits: np.ndarray, targets, mask) -> float:
    """Mean ``-log softmax(logits)[target]`` over masked positions."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.intp)
    if not mask.any():
        raise ContractError("nll_loss needs at least one masked position")
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    rows = np.nonzero(mask)[0]
    return float(-logp[rows, targets[rows]].mean())


def pairs_nll(weights: dict, config: ModelConfig, enc: EncodedPairs) -> float:
    logits = logits_for(weights, config, enc.mix)
    return nll_loss(logits, enc.targets, np.ones(enc.n_rows, dtype=bool))


def argmax_decode(model: ToyModel, prompt: Sequence[int], answer_len: int) -> list[int]:
    """Greedy continuation; ties go to the lowest token id."""
    return decode_with(model.weights, model.config, prompt, answer_len)


def decode_with(weights: dict, config: ModelConfig, prompt: Sequence[int], answer_len: int) -> list[int]:
    if answer_len < 1:
        raise ContractError("answer_len must be >= 1")
    check_tokens(prompt, config.vocab_size)
    seq = list(prompt)
    out = []
    for _ in range(answer_len):
        mix = context_matrix([seq], [(0, len(seq) - 1)], config.vocab_size)
        logits = logits_for(weights, config, mix)[0]
        tok = int(np.argmax(logits))
        out.append(tok)
        seq.append(tok)
    return out


def batch_decode(weights: dict, config: ModelConfig, pairs: Sequence[Pair]) -> np.ndarray:
    """Exact-match flags of greedy decoding for each (prompt, answer) pair.

    Single-token answers are decoded in one batched forward; longer ones fall
    back to :func:`decode_with`.
    """
    if all(len(y) == 1 for _, y in pairs):
        mix = context_matrix([list(x) for x, _ in pairs],
                             [(i, len(x) - 1) for i, (x, _) in enumerate(pairs)], config.vocab_size)
        pred = np.argmax(logits_for(weights, config, mix), axis=1)
        return np.array([pred[i] == y[0] for i, (_, y) in enumerate(pairs)], dtype=bool)
    return np.array([decode_with(weights, config, x, len(y)) == list(y) for x, y in pairs], dtype=bool)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class FitReport:
    steps: int
    final_loss: float
    accuracy: float


def fit(model: ToyModel, pairs: Sequence[Pair], *, steps: int = 3000, lr: float = 1e-2,
        target_accuracy: float = 1.0, check_every: int = 100,
        names: Iterable[str] | None = None) -> FitReport:
    """Full-batch Adam on the teacher-forced NLL of ``pairs``.

    Stops early once exact-match accuracy reaches ``target_accuracy``.  Only
    the weights in ``names`` are trained (default: all of them).
    """
    enc = encode_pairs(pairs, model.vocab_size)
    names = list(model.weights) if names is None else list(names)
    opt = nc.Adam(lr)
    loss_v = float("nan")
    acc = 0.0
    for step in range(1, steps + 1):
        tape = nc.Tape()
        nodes = weight_nodes(tape, model.weights, names)
        loss = nc.softmax_xent(forward_rows(tape, nodes, enc.mix, model.config, record=False), enc.targets)
        loss_v = float(loss.value)
        if not np.isfinite(loss_v):
            raise NumericError(f"pretraining loss diverged at step {step}")
        grads = nc.backward(tape, loss).params
        opt.step(model.weights, grads)
        if step % check_every == 0 or step == steps:
            acc = float(batch_decode(model.weights, model.config, pairs).mean())
            if acc >= target_accuracy:
                return FitReport(step, loss_v, acc)
    return FitReport(steps, loss_v, acc)
