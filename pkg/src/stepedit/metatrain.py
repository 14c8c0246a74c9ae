"""Meta-losses and hypernetwork trainers.

Meta-gradients are computed in two halves, mirroring how massive editors keep
memory bounded: the meta-loss is back-propagated through the edited model to
the edited weights only, and that weight-gradient is then pushed through the
recorded delta construction into the hypernetwork parameters.  The captured
traces are constants, so no gradient flows through the inner backward pass.

Modes:

``smedit_batch``
    One shared hypernetwork, weights reset to ``W0`` every iteration, meta-loss
    ``L_e + eta * L_cons`` evaluated after each step and the hypernetwork
    updated after each step.
``smedit_sequential``
    Step-specific hypernetworks (rank decay), edited weights carried across a
    sequence of edit batches, meta-gradients accumulated over the sequence and
    applied once at its end.
``baseline_kl`` / ``baseline_kl_mbps``
    ``L_e + lambda_loc * KL`` with a shared hypernetwork; one update per
    iteration (batch scenario) or per sequence (sequential scenario).
    ``baseline_kl`` is single-step, ``baseline_kl_mbps`` uses ``S >= 2``.
``baseline_rledit``
    Sequential; per edit ``gamma^i (L_e + lambda_loc L_loc + L_back + eta ||dW_i||^2)``
    summed over the sequence.
"""

from __future__ import annotations

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from stepedit import numcore as nc
from stepedit import toylm
from stepedit.editengine import AGGREGATIONS, add_deltas, capture_traces, delta_nodes, hyper_nodes
from stepedit.errors import ConfigError, ContractError, NumericError
from stepedit.hypernet import HypernetworkStepSet, MetaOptimizer, build_shared, build_stepset

log = logging.getLogger(__name__)

MODES = ("smedit_sequential", "smedit_batch", "baseline_kl", "baseline_rledit", "baseline_kl_mbps")
CONS_VARIANTS = ("total_drift", "per_step_sum")
CATEGORIES = ("cache_grad", "compute_delta", "edit_loss_bp", "loc_loss_bp", "update_f")
LOG_FIELDS = ("iteration", "edit_index", "step", "L_e", "L_loc", "L_cons", "total", "wall_ms")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainerConfig:
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
    rank: int = 64
    n_blocks: int = 4
    init_lambda: float = 0.1
    aggregation: str = "least_squares"
    cons_variant: str = "total_drift"
    rank_decay: bool = True
    # batch or sequential; only consulted by the two KL baselines
    scenario: str = "batch"
    batch_size: int = 10
    seq_len: int = 5
    iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        if self.mode == "baseline_kl" and self.S != 1:
            raise ConfigError("baseline_kl is single-step; use baseline_kl_mbps for S >= 2")
        if self.mode == "baseline_kl_mbps" and self.S < 2:
            raise ConfigError("baseline_kl_mbps needs S >= 2")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.cons_variant not in CONS_VARIANTS:
            raise ConfigError(f"cons_variant must be one of {CONS_VARIANTS}")
        if self.scenario not in ("batch", "sequential"):
            raise ConfigError("scenario must be 'batch' or 'sequential'")
        if self.batch_size < 1 or self.seq_len < 1 or self.iterations < 0 or self.q < 0:
            raise ConfigError("batch_size, seq_len >= 1 and iterations, q >= 0 required")
        if self.eta < 0 or self.lambda_loc < 0 or self.meta_lr <= 0 or self.max_grad_norm <= 0:
            raise ConfigError("eta, lambda_loc must be >= 0; meta_lr, max_grad_norm > 0")

    @property
    def sequential(self) -> bool:
        if self.mode in ("smedit_sequential", "baseline_rledit"):
            return True
        if self.mode == "smedit_batch":
            return False
        return self.scenario == "sequential"

    @property
    def uses_kl(self) -> bool:
        return self.mode in ("baseline_kl", "baseline_kl_mbps", "baseline_rledit")

    @property
    def stepwise(self) -> bool:
        return self.mode == "smedit_batch"

    def replace(self, **kw) -> "TrainerConfig":
        return replace(self, **kw)

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# losses (numeric)
# --------------------------------------------------------------------------

@dataclass
class LossReport:
    """Loss components of one meta-loss evaluation.

    ``total = L_e + lambda_loc*L_loc + eta*L_cons + L_back`` over the
    components that are present.
    """

    edit_loss: float
    locality_loss: float | None = None
    cons_loss: float | None = None
    backtracking_loss: float | None = None
    lambda_loc: float = 0.0
    eta: float = 0.0
    gamma: float = 1.0
    mu: float = 0.0
    q: int = 0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.combine()

    def combine(self) -> float:
        t = self.edit_loss
        if self.locality_loss is not None:
            t += self.lambda_loc * self.locality_loss
        if self.cons_loss is not None:
            t += self.eta * self.cons_loss
        if self.backtracking_loss is not None:
            t += self.backtracking_loss
        return t


def _pairs(samples, which: str) -> list:
    out = []
    for s in samples:
        if which == "edit":
            out.append(s.edit)
        elif which == "equivalents":
            out.extend(s.equivalents)
        else:
            out.extend(s.unrelated)
    return out


def edit_loss(weights: dict, config: toylm.ModelConfig, pairs: Sequence) -> float:
    """Mean NLL of the answer tokens of ``pairs`` (equivalence pairs) under ``weights``."""
    if len(pairs) == 0:
        raise ContractError("edit_loss needs at least one pair")
    return toylm.pairs_nll(weights, config, toylm.encode_pairs(pairs, config.vocab_size))


def kl_locality_loss(w0: dict, w1: dict, config: toylm.ModelConfig, pairs: Sequence) -> float:
    """Mean over answer positions of ``KL(p_W0 || p_W1)`` for the unrelated ``pairs``."""
    enc = toylm.encode_pairs(pairs, config.vocab_size)
    lp = toylm.log_softmax(toylm.logits_for(w0, config, enc.mix))
    lq = toylm.log_softmax(toylm.logits_for(w1, config, enc.mix))
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)))


def cons_loss(variant: str, *, deltas: Sequence[dict] = (), weights: dict | None = None,
              w0: dict | None = None) -> float:
    """``per_step_sum``: sum of squared delta norms; ``total_drift``: ``||W - W0||^2`` over the keys of ``weights``."""
    if variant == "per_step_sum":
        return float(sum(float(np.sum(v * v)) for d in deltas for v in d.values()))
    if variant == "total_drift":
        if weights is None or w0 is None:
            raise ContractError("total_drift needs weights and w0")
        return float(sum(float(np.sum((weights[k] - w0[k]) ** 2)) for k in weights))
    raise ConfigError(f"unknown cons variant {variant!r}")


def backtracking_loss(history: Sequence, weights: dict, w0: dict, config: toylm.ModelConfig,
                      mu: float, lambda_loc: float, q: int) -> float:
    """``sum_j mu^(i-j) (L_e_j + lambda_loc L_loc_j)`` over the last ``q`` past samples.

    ``history`` is ordered oldest first; its last element is edit ``i-1``.
    """
    window = list(history)[-q:] if q > 0 else []
    total = 0.0
    for age, samples in enumerate(reversed(window), start=1):
        w = mu ** age
        if w == 0.0:
            continue
        le = edit_loss(weights, config, _pairs(samples, "equivalents"))
        ll = kl_locality_loss(w0, weights, config, _pairs(samples, "unrelated"))
        total += w * (le + lambda_loc * ll)
    return total


def rl_objective(reports: Sequence[LossReport], gamma: float, eta: float | None = None) -> float:
    """``J = sum_i gamma^i (L_meta_i + L_back_i + eta ||dW_i||^2)`` with ``i`` from 1.

    Each report's ``total`` already holds its bracketed term; ``eta`` overrides
    the report's own coefficient when given.
    """
    J = 0.0
    for i, r in enumerate(reports, start=1):
        term = r.total
        if eta is not None and r.cons_loss is not None:
            term += (eta - r.eta) * r.cons_loss
        J += gamma ** i * term
    return J


# --------------------------------------------------------------------------
# gradient helpers
# --------------------------------------------------------------------------

def _nll_grad(weights: dict, config, pairs, layer_ids) -> tuple[float, dict]:
    enc = toylm.encode_pairs(pairs, config.vocab_size)
    tape = nc.Tape()
    nodes = toylm.weight_nodes(tape, weights, layer_ids)
    loss = nc.softmax_xent(toylm.forward_rows(tape, nodes, enc.mix, config, record=False), enc.targets)
    g = nc.backward(tape, loss).params
    return float(loss.value), {k: g[k] for k in layer_ids}


def _kl_grad(w0: dict, weights: dict, config, pairs, layer_ids) -> tuple[float, dict]:
    enc = toylm.encode_pairs(pairs, config.vocab_size)
    ref = toylm.logits_for(w0, config, enc.mix)
    tape = nc.Tape()
    nodes = toylm.weight_nodes(tape, weights, layer_ids)
    logits = toylm.forward_rows(tape, nodes, enc.mix, config, record=False)
    loss = nc.kl_rows(ref, logits)
    g = nc.backward(tape, loss).params
    return float(loss.value), {k: g[k] for k in layer_ids}


def _axpy(acc: dict, scale: float, g: dict) -> None:
    for k, v in g.items():
        acc[k] = acc[k] + scale * v if k in acc else scale * v


class NullTimer:
    @contextmanager
    def section(self, name):
        yield


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------

def _hypernet_shapes(model: toylm.ToyModel):
    ids = model.editable_set
    shapes = {model.weights[k].shape for k in ids}
    if len(shapes) != 1:
        raise ContractError(f"editable layers must share one shape, got {sorted(shapes)}")
    d_out, d_in = shapes.pop()
    return d_in, d_out, ids


def build_hypernets(config: TrainerConfig, model: toylm.ToyModel) -> HypernetworkStepSet:
    d_u, d_delta, ids = _hypernet_shapes(model)
    kw = dict(n_blocks=config.n_blocks, init_lambda=config.init_lambda, seed=config.seed)
    if config.mode == "smedit_sequential":
        return build_stepset(config.S, config.rank, d_u, d_delta, ids, rank_decay=config.rank_decay, **kw)
    return build_shared(config.S, config.rank, d_u, d_delta, ids, **kw)


class Trainer:
    """Meta-trains hypernetworks for one :class:`TrainerConfig`.

    ``model`` holds the pre-edit weights ``W0`` and is never modified.
    ``train_samples`` is the pool of :class:`~stepedit.factsynth.EditSample`
    drawn from, in a seeded shuffled order, batch by batch.
    """

    def __init__(self, config: TrainerConfig, model: toylm.ToyModel, train_samples: Sequence,
                 hypernets: HypernetworkStepSet | None = None):
        if len(train_samples) < config.batch_size:
            raise ContractError(f"{len(train_samples)} training samples < batch size {config.batch_size}")
        self.config = config
        self.model_config = model.config
        self.w0 = {k: v.copy() for k, v in model.weights.items()}
        self.editable = model.editable_set
        self.samples = list(train_samples)
        self.hypernets = hypernets if hypernets is not None else build_hypernets(config, model)
        if self.hypernets.S < config.S:
            raise ConfigError(f"hypernetworks cover {self.hypernets.S} steps, config needs {config.S}")
        self.optimizer = MetaOptimizer(config.meta_lr, config.max_grad_norm)
        self.rng = nc.seeded_rng(config.seed)
        self.queue: list[int] = []
        self.iteration = 0
        self.log: list[dict] = []
        self.skipped: list[dict] = []
        self.n_captures = 0
        self.n_updates = 0
        self.keep_grads = False
        self.meta_grads: list[dict] = []

    # -- data ------------------------------------------------------------

    def _next_batch(self) -> list:
        out = []
        while len(out) < self.config.batch_size:
            if not self.queue:
                self.queue = [int(i) for i in self.rng.permutation(len(self.samples))]
            out.append(self.samples[self.queue.pop(0)])
        return out

    # -- public ------------------------------------------------------------

    def run(self, iterations: int | None = None, timer=None) -> list[dict]:
        n = self.config.iterations if iterations is None else iterations
        for _ in range(n):
            self.run_iteration(timer)
        return self.log

    def run_iteration(self, timer=None) -> list[dict]:
        timer = timer or NullTimer()
        self.iteration += 1
        t0 = time.perf_counter()
        start = len(self.log)
        if self.config.sequential:
            self._sequence(timer, t0)
        else:
            self._batch(timer, t0)
        return self.log[start:]

    def update_stepset(self) -> HypernetworkStepSet:
        return self.hypernets

    # -- internals ---------------------------------------------------------

    def _record(self, t0, edit_index, step, rep: LossReport | None, le: float | None = None):
        if rep is None:
            rep = LossReport(le)
        row = {"iteration": self.iteration, "edit_index": edit_index, "step": step,
               "L_e": rep.edit_loss, "L_loc": rep.locality_loss, "L_cons": rep.cons_loss,
               "total": rep.total, "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
        for k in ("L_e", "L_loc", "L_cons", "total"):
            if row[k] is not None and not math.isfinite(row[k]):
                raise NumericError(f"non-finite {k} at iteration {self.iteration}, step {step}")
        self.log.append(row)

    def _edit_steps(self, timer, weights, samples, hook):
        """Run S capture/transform/apply steps from ``weights``.

        ``hook(s, weights_s, tape, nodes)`` is called after each step and may
        return a weight-gradient to push into that step's hypernetwork.
        Returns the final weights and the list of per-step (tape, delta nodes, prefix).
        """
        cfg = self.config
        pairs = _pairs(samples, "edit")
        steps = []
        for s in range(1, cfg.S + 1):
            with timer.section("cache_grad"):
                cap = capture_traces(weights, self.model_config, pairs, self.editable)
                self.n_captures += 1
            with timer.section("compute_delta"):
                net = self.hypernets.for_step(s)
                prefix = self.hypernets.prefix(s)
                tape = nc.Tape()
                hnodes = hyper_nodes(tape, net, prefix)
                dnodes = delta_nodes(hnodes, net.config, cap.traces, cfg.inner_lr, cfg.aggregation)
                delta = {k: v.value for k, v in dnodes.items()}
                for k, v in delta.items():
                    if not np.all(np.isfinite(v)):
                        raise NumericError(f"non-finite delta for {k} at step {s}")
                weights = add_deltas(weights, delta)
            steps.append((tape, dnodes, delta))
            hook(s, weights, steps)
        return weights, steps

    def _push_grads(self, timer, steps, seeds_per_step, acc: dict):
        """Back-propagate per-step weight-gradients into the hypernetwork parameters."""
        with timer.section("update_f"):
            for (tape, dnodes, _), seeds in zip(steps, seeds_per_step):
                if seeds is None:
                    continue
                g = nc.backward_from(tape, {dnodes[k]: seeds[k] for k in dnodes})
                _axpy(acc, 1.0, g.params)

    def _apply(self, timer, grads: dict):
        with timer.section("update_f"):
            if self.keep_grads:
                self.meta_grads.append({k: v.copy() for k, v in grads.items()})
            params = self.hypernets.flat_params()
            report = self.optimizer.step(params, grads)
            if not report.applied:
                entry = {"iteration": self.iteration, "reason": report.reason}
                self.skipped.append(entry)
                log.warning("meta-update skipped at iteration %d: %s", self.iteration, report.reason)
            else:
                self.n_updates += 1

    def _meta_grad(self, timer, weights, samples, deltas: Sequence[dict], start: dict):
        """Loss report and weight-gradients of the meta-loss at ``weights``.

        Returns ``(report, shared_grad, per_step_extra)``: ``shared_grad``
        applies to every step's delta (it is d/dW of terms of the final
        weights), ``per_step_extra[s]`` only to step ``s``.
        """
        cfg = self.config
        ids = self.editable
        per_step = [dict() for _ in deltas]
        with timer.section("edit_loss_bp"):
            le, g = _nll_grad(weights, self.model_config, _pairs(samples, "equivalents"), ids)
            grad = dict(g)
            cons = None
            if cfg.mode in ("smedit_batch", "smedit_sequential"):
                if cfg.cons_variant == "total_drift":
                    cons = cons_loss("total_drift", weights={k: weights[k] for k in ids}, w0=self.w0)
                    _axpy(grad, 2.0 * cfg.eta, {k: weights[k] - self.w0[k] for k in ids})
                else:
                    cons = cons_loss("per_step_sum", deltas=deltas)
                    for d, extra in zip(deltas, per_step):
                        _axpy(extra, 2.0 * cfg.eta, d)
            elif cfg.mode == "baseline_rledit":
                cons = cons_loss("total_drift", weights={k: weights[k] for k in ids}, w0=start)
                _axpy(grad, 2.0 * cfg.eta, {k: weights[k] - start[k] for k in ids})
        lloc = None
        if cfg.uses_kl:
            with timer.section("loc_loss_bp"):
                lloc, gk = _kl_grad(self.w0, weights, self.model_config, _pairs(samples, "unrelated"), ids)
                _axpy(grad, cfg.lambda_loc, gk)
        rep = LossReport(le, lloc, cons, None, lambda_loc=cfg.lambda_loc if lloc is not None else 0.0,
                         eta=cfg.eta if cons is not None else 0.0, gamma=cfg.gamma, mu=cfg.mu, q=cfg.q)
        return rep, grad, per_step

    def _backtrack(self, timer, weights, history):
        """Backtracking term and its weight-gradient (RLEdit)."""
        cfg = self.config
        ids = self.editable
        window = history[-cfg.q:] if cfg.q > 0 else []
        total, grad = 0.0, {}
        for age, samples in enumerate(reversed(window), start=1):
            w = cfg.mu ** age
            if w == 0.0:
                continue
            with timer.section("edit_loss_bp"):
                le, g = _nll_grad(weights, self.model_config, _pairs(samples, "equivalents"), ids)
                _axpy(grad, w, g)
            with timer.section("loc_loss_bp"):
                ll, gk = _kl_grad(self.w0, weights, self.model_config, _pairs(samples, "unrelated"), ids)
                _axpy(grad, w * cfg.lambda_loc, gk)
            total += w * (le + cfg.lambda_loc * ll)
        return total, grad

    def _batch(self, timer, t0):
        cfg = self.config
        with timer.section("cache_grad"):
            samples = self._next_batch()
        weights = {k: self.w0[k] for k in self.w0}

        if cfg.stepwise:
            def hook(s, w_s, steps):
                deltas = [d for _, _, d in steps]
                rep, grad, per_step = self._meta_grad(timer, w_s, samples, deltas, self.w0)
                seeds = [None] * len(steps)
                seeds[-1] = dict(grad)
                _axpy(seeds[-1], 1.0, per_step[-1])
                acc = {}
                self._push_grads(timer, steps, seeds, acc)
                self._apply(timer, acc)
                self._record(t0, 1, s, rep)
            self._edit_steps(timer, weights, samples, hook)
            return

        def hook(s, w_s, steps):
            if s < cfg.S:
                with timer.section("edit_loss_bp"):
                    le = edit_loss(w_s, self.model_config, _pairs(samples, "equivalents"))
                self._record(t0, 1, s, None, le)
        weights, steps = self._edit_steps(timer, weights, samples, hook)
        deltas = [d for _, _, d in steps]
        rep, grad, per_step = self._meta_grad(timer, weights, samples, deltas, self.w0)
        seeds = []
        for extra in per_step:
            sd = dict(grad)
            _axpy(sd, 1.0, extra)
            seeds.append(sd)
        acc = {}
        self._push_grads(timer, steps, seeds, acc)
        self._apply(timer, acc)
        self._record(t0, 1, cfg.S, rep)

    def _sequence(self, timer, t0):
        cfg = self.config
        weights = {k: self.w0[k] for k in self.w0}
        history: list = []
        acc: dict = {}
        for t in range(1, cfg.seq_len + 1):
            with timer.section("cache_grad"):
                samples = self._next_batch()
            start = weights

            def hook(s, w_s, steps, samples=samples, t=t):
                if s < cfg.S:
                    with timer.section("edit_loss_bp"):
                        le = edit_loss(w_s, self.model_config, _pairs(samples, "equivalents"))
                    self._record(t0, t, s, None, le)

            weights, steps = self._edit_steps(timer, weights, samples, hook)
            deltas = [d for _, _, d in steps]
            rep, grad, per_step = self._meta_grad(timer, weights, samples, deltas, start)
            if cfg.mode == "baseline_rledit":
                lback, gback = self._backtrack(timer, weights, history)
                _axpy(grad, 1.0, gback)
                rep = LossReport(rep.edit_loss, rep.locality_loss, rep.cons_loss, lback,
                                 lambda_loc=cfg.lambda_loc, eta=cfg.eta, gamma=cfg.gamma, mu=cfg.mu, q=cfg.q)
                discount = cfg.gamma ** t
                grad = {k: discount * v for k, v in grad.items()}
                per_step = [{k: discount * v for k, v in e.items()} for e in per_step]
            seeds = []
            for extra in per_step:
                sd = dict(grad)
                _axpy(sd, 1.0, extra)
                seeds.append(sd)
            edit_acc: dict = {}
            self._push_grads(timer, steps, seeds, edit_acc)
            if self.keep_grads:
                self.meta_grads.append({k: v.copy() for k, v in edit_acc.items()})
            _axpy(acc, 1.0, edit_acc)
            self._record(t0, t, cfg.S, rep)
            history.append(samples)
        keep, self.keep_grads = self.keep_grads, False
        try:
            self._apply(timer, acc)
        finally:
            self.keep_grads = keep

    # -- checkpointing -----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "queue": list(self.queue),
            "rng": self.rng.bit_generator.state,
            "optimizer": self.optimizer.state_dict(),
            "n_captures": self.n_captures,
            "n_updates": self.n_updates,
            "log": [dict(r) for r in self.log],
            "skipped": list(self.skipped),
        }

    def load_state_dict(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.queue = [int(i) for i in state["queue"]]
        self.rng.bit_generator.state = state["rng"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.n_captures = int(state["n_captures"])
        self.n_updates = int(state["n_updates"])
        self.log = [dict(r) for r in state["log"]]
        self.skipped = list(state["skipped"])


# --------------------------------------------------------------------------
# entry points
# --------------------------------------------------------------------------

def train_sequential(config: TrainerConfig, samples: Sequence, model: toylm.ToyModel, timer=None):
    if config.mode != "smedit_sequential":
        raise ConfigError("train_sequential needs mode smedit_sequential")
    tr = Trainer(config, model, samples)
    tr.run(timer=timer)
    return tr.hypernets, tr.log


def train_batch(config: TrainerConfig, samples: Sequence, model: toylm.ToyModel, timer=None):
    if config.mode != "smedit_batch":
        raise ConfigError("train_batch needs mode smedit_batch")
    tr = Trainer(config, model, samples)
    tr.run(timer=timer)
    return tr.hypernets, tr.log


def train_baseline(config: TrainerConfig, samples: Sequence, model: toylm.ToyModel, timer=None):
    if config.mode not in ("baseline_kl", "baseline_rledit", "baseline_kl_mbps"):
        raise ConfigError("train_baseline needs a baseline mode")
    tr = Trainer(config, model, samples)
    tr.run(timer=timer)
    return tr.hypernets, tr.log


def strip_wall(log_rows: Sequence[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in log_rows]
