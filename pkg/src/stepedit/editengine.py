"""From captured gradients to weight updates.

Two ways to turn pseudo-traces into a per-layer update:

* ``rank1``: ``delta_W = -lr * sum_k pd_k pu_k^T``
* ``least_squares``: columns ``d_k = -lr * pd_k (pu_k . u_k)`` are aggregated by
  the ridge problem ``min ||dW U - D||^2 + lam ||dW||^2`` whose solution is
  ``D U^T (U U^T + lam I)^-1`` (Cholesky, never an explicit inverse).

:func:`mbps_edit` runs ``S`` capture/transform/apply rounds on one batch.
The trainers in :mod:`stepedit.metatrain` use :func:`delta_nodes` directly so
the construction is recorded on a tape and can be differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from stepedit import numcore as nc
from stepedit import toylm
from stepedit.errors import ContractError, NumericError, ShapeError
from stepedit.hypernet import Hypernetwork, HypernetworkStepSet, transform

AGGREGATIONS = ("rank1", "least_squares")


@dataclass
class WeightDelta:
    """Per-layer dense updates produced at one editing step."""

    deltas: dict
    step: int = 1
    frobenius_norms: dict = field(init=False)

    def __post_init__(self):
        self.frobenius_norms = {k: float(np.linalg.norm(v)) for k, v in self.deltas.items()}
        for k, n in self.frobenius_norms.items():
            if not math.isfinite(n):
                raise NumericError(f"delta for {k} at step {self.step} is not finite")

    def sq_norm(self) -> float:
        return float(sum(float(np.sum(v * v)) for v in self.deltas.values()))

    def __neg__(self):
        return WeightDelta({k: -v for k, v in self.deltas.items()}, self.step)

    def __add__(self, other: "WeightDelta") -> "WeightDelta":
        keys = set(self.deltas) | set(other.deltas)
        out = {}
        for k in sorted(keys):
            a, b = self.deltas.get(k), other.deltas.get(k)
            out[k] = a + b if a is not None and b is not None else (a if b is None else b).copy()
        return WeightDelta(out, max(self.step, other.step))


@dataclass
class AggregationInput:
    """Per-layer columns ``D`` (d' x b), inputs ``U`` (d x b) and ridge strengths ``lam``."""

    D: dict
    U: dict
    lam: dict

    def __post_init__(self):
        if set(self.D) != set(self.U) or set(self.D) != set(self.lam):
            raise ContractError("D, U and lambda must cover the same layers")
        for k in self.D:
            if self.D[k].shape[1] != self.U[k].shape[1]:
                raise ShapeError(f"{k}: D has {self.D[k].shape[1]} columns, U has {self.U[k].shape[1]}")
            if not self.lam[k] > 0:
                raise ContractError(f"{k}: lambda must be positive")


# --------------------------------------------------------------------------
# capture
# --------------------------------------------------------------------------

@dataclass
class Capture:
    loss: float
    traces: dict
    owner: np.ndarray


def capture_traces(weights: dict, config: toylm.ModelConfig, pairs: Sequence, layer_ids=None) -> Capture:
    """Forward/backward of the mean answer NLL; one trace row per answer position."""
    if len(pairs) == 0:
        raise ContractError("capture_traces needs a non-empty batch")
    layer_ids = tuple(layer_ids or config.editable_set())
    enc = toylm.encode_pairs(pairs, config.vocab_size)
    tape = nc.Tape()
    nodes = toylm.weight_nodes(tape, weights, layer_ids)
    logits = toylm.forward_rows(tape, nodes, enc.mix, config)
    loss = nc.softmax_xent(logits, enc.targets)
    grads = nc.backward(tape, loss)
    traces = {lid: grads.traces[lid] for lid in layer_ids}
    for lid, tr in traces.items():
        nc.check_finite(f"trace {lid}", tr.delta)
    return Capture(float(loss.value), traces, enc.owner)


# --------------------------------------------------------------------------
# numeric delta formulas
# --------------------------------------------------------------------------

def rank1_delta(pseudo: dict, lr: float, step: int = 1) -> WeightDelta:
    """``pseudo`` maps layer id to ``(pseudo_delta rows, pseudo_u rows)``."""
    out = {}
    for lid, (pd, pu) in pseudo.items():
        pd, pu = np.atleast_2d(pd), np.atleast_2d(pu)
        if pd.shape[0] != pu.shape[0]:
            raise ShapeError(f"{lid}: {pd.shape[0]} pseudo-gradients vs {pu.shape[0]} pseudo-inputs")
        out[lid] = -lr * (pd.T @ pu)
    return WeightDelta(out, step)


def ridge_solve(D: np.ndarray, U: np.ndarray, lam: float) -> np.ndarray:
    """``D U^T (U U^T + lam I)^-1`` via Cholesky."""
    if not lam > 0:
        raise ContractError("lambda must be positive")
    A = U @ U.T + lam * np.eye(U.shape[0])
    try:
        factor = sla.cho_factor(A, lower=True, check_finite=True)
        return sla.cho_solve(factor, U @ D.T, check_finite=True).T
    except (ValueError, sla.LinAlgError) as exc:
        raise NumericError(f"ridge factorization failed: {exc}") from exc


def ls_aggregate(agg: AggregationInput, step: int = 1) -> WeightDelta:
    return WeightDelta({k: ridge_solve(agg.D[k], agg.U[k], float(agg.lam[k])) for k in sorted(agg.D)}, step)


def ridge_objective(delta: np.ndarray, D: np.ndarray, U: np.ndarray, lam: float) -> float:
    r = delta @ U - D
    return float(np.sum(r * r) + lam * np.sum(delta * delta))


def aggregation_input(pseudo: dict, raw_u: dict, lam: dict, lr: float) -> AggregationInput:
    """Columns ``d_k = -lr * pd_k (pu_k . u_k)`` and ``U = [u_k]`` per layer."""
    D, U = {}, {}
    for lid, (pd, pu) in pseudo.items():
        u = raw_u[lid]
        coef = np.sum(pu * u, axis=1, keepdims=True)
        D[lid] = (-lr * pd * coef).T
        U[lid] = u.T
    return AggregationInput(D, U, dict(lam))


# --------------------------------------------------------------------------
# differentiable construction
# --------------------------------------------------------------------------

def delta_nodes(nodes: dict, net_config, traces: dict, lr: float, mode: str) -> dict:
    """Record pseudo-trace and delta construction for every traced layer on a tape.

    ``nodes`` maps the hypernetwork's parameter names to tape nodes.  Traces
    are constants (gradients do not flow back into the edited model's own
    backward pass).
    """
    if mode not in AGGREGATIONS:
        raise ContractError(f"unknown aggregation mode {mode!r}")
    out = {}
    for lid in sorted(traces):
        tr = traces[lid]
        pd, pu = transform(nodes, net_config, lid, tr.u, tr.delta)
        if mode == "rank1":
            out[lid] = nc.matmul(nc.transpose(pd), pu) * (-lr)
        else:
            coef = nc.reduce_sum(pu * tr.u, axis=1, keepdims=True)
            d_cols = nc.transpose(pd * coef * (-lr))
            lam = nc.exp(nodes[f"log_lambda.{lid}"])
            out[lid] = nc.ls_solve(d_cols, tr.u.T, lam)
    return out


def hyper_nodes(tape: nc.Tape, net: Hypernetwork, prefix: str = "", trainable: bool = True) -> dict:
    if trainable:
        return {k: tape.param(v, prefix + k) for k, v in net.params.items()}
    return {k: tape.const(v) for k, v in net.params.items()}


def compute_delta(net: Hypernetwork, traces: dict, lr: float, mode: str, step: int = 1) -> WeightDelta:
    tape = nc.Tape()
    nodes = hyper_nodes(tape, net, trainable=False)
    d = delta_nodes(nodes, net.config, traces, lr, mode)
    return WeightDelta({k: v.value for k, v in d.items()}, step)


# --------------------------------------------------------------------------
# applying edits
# --------------------------------------------------------------------------

def apply_delta(model: toylm.ToyModel, delta: WeightDelta) -> dict:
    """Add ``delta`` to the named editable layers in place; returns the weights dict."""
    editable = set(model.editable_set)
    unknown = set(delta.deltas) - editable
    if unknown:
        raise ContractError(f"delta touches non-editable or unknown layers {sorted(unknown)}")
    for k, v in delta.deltas.items():
        if v.shape != model.weights[k].shape:
            raise ShapeError(f"{k}: delta {v.shape} vs weight {model.weights[k].shape}")
    for k in sorted(delta.deltas):
        model.weights[k] = model.weights[k] + delta.deltas[k]
    return model.weights


def add_deltas(weights: dict, deltas: dict) -> dict:
    out = dict(weights)
    for k, v in deltas.items():
        out[k] = weights[k] + v
    return out


@dataclass
class EditResult:
    weights: dict
    deltas: list
    step_losses: list  # edit-pair loss before each step, then after the last one


def mbps_edit(model: toylm.ToyModel, batch: Sequence, hypernets: HypernetworkStepSet | Hypernetwork,
              S: int | None = None, aggregation: str = "least_squares", lr: float = 1e-2,
              commit: bool = True) -> EditResult:
    """Edit ``model`` on ``batch`` with ``S`` transformed gradient steps.

    ``batch`` holds :class:`~stepedit.factsynth.EditSample` objects or raw
    ``(x, y)`` pairs.  Step ``s`` uses ``hypernets.for_step(s)``; a bare
    :class:`Hypernetwork` is reused at every step.  The model is only modified
    (when ``commit``) after all steps succeeded.
    """
    if isinstance(hypernets, Hypernetwork):
        hypernets = HypernetworkStepSet([hypernets], S or 1, shared=True)
    S = hypernets.S if S is None else S
    if S < 1 or S > hypernets.S:
        raise ContractError(f"S={S} but hypernetworks cover {hypernets.S} steps")
    pairs = [b.edit if hasattr(b, "edit") else b for b in batch]
    cfg = model.config
    weights = dict(model.weights)
    deltas, losses = [], []
    for s in range(1, S + 1):
        cap = capture_traces(weights, cfg, pairs)
        losses.append(cap.loss)
        net = hypernets.for_step(s)
        try:
            delta = compute_delta(net, cap.traces, lr, aggregation, step=s)
        except NumericError as exc:
            raise NumericError(f"edit aborted at step {s}: {exc}") from exc
        weights = add_deltas(weights, delta.deltas)
        deltas.append(delta)
    final_loss = toylm.pairs_nll(weights, cfg, toylm.encode_pairs(pairs, cfg.vocab_size))
    if not math.isfinite(final_loss):
        raise NumericError(f"edit aborted: non-finite loss after {S} steps")
    losses.append(final_loss)
    if commit:
        for k in model.editable_set:
            model.weights[k] = weights[k]
    return EditResult(weights, deltas, losses)


def fine_tune_step(model: toylm.ToyModel, pairs: Sequence, lr: float) -> dict:
    """Weights after one plain gradient-descent step on the editable layers."""
    cap = capture_traces(model.weights, model.config, pairs)
    return {k: model.weights[k] - lr * cap.traces[k].gradient() for k in model.editable_set}


def delta_dump_rows(deltas: Sequence[WeightDelta]) -> list[dict]:
    """Rows ``{layer_id, step, frobenius_norm}`` for CSV export."""
    return [{"layer_id": k, "step": d.step, "frobenius_norm": d.frobenius_norms[k]}
            for d in deltas for k in sorted(d.deltas)]
