"""Editing hypernetworks mapping per-position ``(u, delta)`` to pseudo-activations/gradients.

Each network is a stack of low-rank residual blocks acting on the
concatenated row ``[u, delta]``::

    xn  = [u / rms(u), delta / rms(delta)]          (row-wise)
    o   = (gelu(xn @ down.T) @ up.T) * scale[l] + shift[l]
    out = x + [rms(u) * o_u, rms(delta) * o_delta]

``scale``/``shift`` are per editable layer so one network serves every layer
of the same shape.  ``up`` starts at zero, which makes a fresh network the
identity.  Re-multiplying by the row norms keeps the map equivariant to the
magnitude of the incoming gradient.

Parameters are kept in a flat ``dict[str, ndarray]``; :class:`HypernetworkStepSet`
prefixes them per step (``"f1.block0.down"``) so one optimizer sees them all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from stepedit import numcore as nc
from stepedit.errors import ConfigError, ContractError, NumericError, ShapeError
from stepedit.store import load_arrays, save_arrays

CHECKPOINT_KIND = "stepedit.hypernet"
CHECKPOINT_VERSION = 1

_RMS_EPS = 1e-24


@dataclass(frozen=True)
class HyperConfig:
    d_u: int
    d_delta: int
    layer_ids: tuple[str, ...]
    rank: int = 64
    n_blocks: int = 4
    init_lambda: float = 0.1

    @property
    def width(self) -> int:
        return self.d_u + self.d_delta


@dataclass
class HyperBlock:
    """View of one residual block's parameters."""

    rank: int
    down_proj: np.ndarray
    up_proj: np.ndarray
    gate_scale: dict
    gate_shift: dict


class Hypernetwork:
    def __init__(self, config: HyperConfig, params: dict | None = None, seed: int = 0):
        if config.rank < 0 or config.n_blocks < 1:
            raise ConfigError("rank must be >= 0 and n_blocks >= 1")
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict:
        cfg = self.config
        rng = nc.seeded_rng(seed)
        w = cfg.width
        params = {}
        for b in range(cfg.n_blocks):
            params[f"block{b}.down"] = rng.normal(0.0, 1.0 / math.sqrt(w), size=(cfg.rank, w))
            params[f"block{b}.up"] = np.zeros((w, cfg.rank))
            for lid in cfg.layer_ids:
                params[f"block{b}.scale.{lid}"] = np.ones(w)
                params[f"block{b}.shift.{lid}"] = np.zeros(w)
        for lid in cfg.layer_ids:
            params[f"log_lambda.{lid}"] = np.asarray(math.log(cfg.init_lambda))
        return params

    @property
    def rank(self) -> int:
        return self.config.rank

    def block(self, b: int) -> HyperBlock:
        p = self.params
        ids = self.config.layer_ids
        return HyperBlock(self.config.rank, p[f"block{b}.down"], p[f"block{b}.up"],
                          {l: p[f"block{b}.scale.{l}"] for l in ids},
                          {l: p[f"block{b}.shift.{l}"] for l in ids})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "Hypernetwork":
        return Hypernetwork(self.config, {k: v.copy() for k, v in self.params.items()})


def _gelu_and_slope(a: np.ndarray):
    a2 = a * a
    t = np.tanh(nc._GELU_C * a * (1.0 + 0.044715 * a2))
    slope = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * nc._GELU_C * (1.0 + 3 * 0.044715 * a2)
    return 0.5 * a * (1.0 + t), slope


def residual_block(x: nc.Node, down: nc.Node, up: nc.Node, scale: nc.Node, shift: nc.Node,
                   d_u: int) -> nc.Node:
    """One residual block as a single tape op with a hand-written VJP.

    Recording the block op by op costs ~30 tape nodes; fusing keeps the
    hypernetwork cheap next to the edited model, as it is at scale.
    """
    tape = x.tape
    xv, W1, W2, sc, sh = x.value, down.value, up.value, scale.value, shift.value
    xu, xd = xv[:, :d_u], xv[:, d_u:]
    ru = np.sqrt(np.mean(xu * xu, axis=1, keepdims=True) + _RMS_EPS)
    rd = np.sqrt(np.mean(xd * xd, axis=1, keepdims=True) + _RMS_EPS)
    xn = np.concatenate([xu / ru, xd / rd], axis=1)
    a = xn @ W1.T
    h, slope = _gelu_and_slope(a)
    o0 = h @ W2.T
    o1 = o0 * sc + sh
    R = np.concatenate([np.broadcast_to(ru, xu.shape), np.broadcast_to(rd, xd.shape)], axis=1)
    out = xv + o1 * R

    def vjp(g):
        do1 = g * R
        dR = g * o1
        d_sc = np.sum(do1 * o0, axis=0)
        d_sh = np.sum(do1, axis=0)
        do0 = do1 * sc
        d_up = do0.T @ h
        da = (do0 @ W2) * slope
        d_down = da.T @ xn
        dxn = da @ W1
        dx = g.copy()
        for sl, r, width in ((slice(0, d_u), ru, d_u), (slice(d_u, None), rd, xv.shape[1] - d_u)):
            xn_p, dxn_p = xn[:, sl], dxn[:, sl]
            dr = np.sum(dR[:, sl], axis=1, keepdims=True) - np.sum(dxn_p * xn_p, axis=1, keepdims=True) / r
            dx[:, sl] += dxn_p / r + dr * xv[:, sl] / (width * r)
        return dx, d_down, d_up, d_sc, d_sh

    return tape._push(out, (x, down, up, scale, shift), vjp)


def transform(nodes: dict, config: HyperConfig, layer_id: str, u, delta) -> tuple[nc.Node, nc.Node]:
    """Pseudo ``(delta, u)`` for the rows of a trace, recorded on the tape of ``nodes``.

    ``nodes`` maps this network's parameter names to tape nodes.
    """
    tape = next(iter(nodes.values())).tape
    u, delta = tape.wrap(u), tape.wrap(delta)
    if layer_id not in config.layer_ids:
        raise ContractError(f"hypernetwork not configured for layer {layer_id!r}")
    if u.shape[1] != config.d_u or delta.shape[1] != config.d_delta or u.shape[0] != delta.shape[0]:
        raise ShapeError(f"trace shapes u{u.shape} delta{delta.shape} do not match "
                         f"hypernetwork ({config.d_u}, {config.d_delta})")
    du = config.d_u
    x = nc.concat_cols(u, delta)
    for b in range(config.n_blocks):
        x = residual_block(x, nodes[f"block{b}.down"], nodes[f"block{b}.up"],
                           nodes[f"block{b}.scale.{layer_id}"], nodes[f"block{b}.shift.{layer_id}"], du)
    return nc.take_cols(x, du, config.width), nc.take_cols(x, 0, du)


def transform_trace(net: Hypernetwork, trace: nc.LayerTrace) -> tuple[np.ndarray, np.ndarray]:
    """Numeric ``(pseudo_delta, pseudo_u)`` for a trace, no gradient bookkeeping."""
    tape = nc.Tape()
    nodes = {k: tape.const(v) for k, v in net.params.items()}
    pd, pu = transform(nodes, net.config, trace.layer_id, trace.u, trace.delta)
    return pd.value, pu.value


@dataclass
class HypernetworkStepSet:
    """Hypernetworks used at each of ``S`` editing steps.

    With ``shared`` a single network is reused at every step; otherwise step
    ``s`` (1-based) has its own network of rank ``ranks[s - 1]``.
    """

    nets: list
    S: int
    shared: bool = False

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        expected = 1 if self.shared else self.S
        if len(self.nets) != expected:
            raise ConfigError(f"expected {expected} hypernetworks, got {len(self.nets)}")

    @property
    def ranks(self) -> list[int]:
        return [self.for_step(s).rank for s in range(1, self.S + 1)]

    def for_step(self, s: int) -> Hypernetwork:
        if not 1 <= s <= self.S:
            raise ContractError(f"step {s} outside 1..{self.S}")
        return self.nets[0] if self.shared else self.nets[s - 1]

    def prefix(self, s: int) -> str:
        return "f1." if self.shared else f"f{s}."

    def flat_params(self) -> dict:
        """Live references to every parameter array, keyed ``"f<s>.<name>"``."""
        out = {}
        for i, net in enumerate(self.nets, start=1):
            for k, v in net.params.items():
                out[f"f{i}.{k}"] = v
        return out

    def flat_vector(self) -> np.ndarray:
        p = self.flat_params()
        return np.concatenate([p[k].ravel() for k in sorted(p)])

    def n_params(self) -> int:
        return sum(n.n_params() for n in self.nets)

    def copy(self) -> "HypernetworkStepSet":
        return HypernetworkStepSet([n.copy() for n in self.nets], self.S, self.shared)

    # -- persistence ----------------------------------------------------

    def header(self) -> dict:
        cfgs = []
        for n in self.nets:
            c = n.config
            cfgs.append({"d_u": c.d_u, "d_delta": c.d_delta, "layer_ids": list(c.layer_ids),
                         "rank": c.rank, "n_blocks": c.n_blocks, "init_lambda": c.init_lambda})
        return {"kind": CHECKPOINT_KIND, "version": CHECKPOINT_VERSION, "S": self.S,
                "shared": self.shared, "ranks": self.ranks, "configs": cfgs}

    def save(self, path):
        return save_arrays(path, self.header(), self.flat_params())

    @classmethod
    def from_arrays(cls, header: dict, arrays: dict) -> "HypernetworkStepSet":
        nets = []
        for i, c in enumerate(header["configs"], start=1):
            cfg = HyperConfig(c["d_u"], c["d_delta"], tuple(c["layer_ids"]), c["rank"],
                              c["n_blocks"], c["init_lambda"])
            prefix = f"f{i}."
            params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            net = Hypernetwork(cfg, params)
            expected = set(Hypernetwork(cfg, seed=0).params)
            if set(params) != expected:
                raise ContractError(f"hypernetwork {i}: parameter set does not match its config")
            nets.append(net)
        return cls(nets, header["S"], header["shared"])

    @classmethod
    def load(cls, path) -> "HypernetworkStepSet":
        header, arrays = load_arrays(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
        return cls.from_arrays(header, arrays)


def decayed_ranks(S: int, base_rank: int) -> list[int]:
    """Rank at step ``s`` is ``floor(base_rank / s)``."""
    return [base_rank // s for s in range(1, S + 1)]


def build_stepset(S: int, base_rank: int, d_u: int, d_delta: int, layer_ids, *,
                  n_blocks: int = 4, init_lambda: float = 0.1, seed: int = 0,
                  rank_decay: bool = True) -> HypernetworkStepSet:
    """Independent per-step hypernetworks with (by default) decaying rank."""
    if S < 1:
        raise ConfigError("S must be >= 1")
    if base_rank < S:
        raise ConfigError(f"base rank {base_rank} < S={S}: the last step would have rank 0")
    ranks = decayed_ranks(S, base_rank) if rank_decay else [base_rank] * S
    nets = [Hypernetwork(HyperConfig(d_u, d_delta, tuple(layer_ids), r, n_blocks, init_lambda),
                         seed=seed * 1000 + s)
            for s, r in enumerate(ranks, start=1)]
    return HypernetworkStepSet(nets, S, shared=False)


def build_shared(S: int, rank: int, d_u: int, d_delta: int, layer_ids, *,
                 n_blocks: int = 4, init_lambda: float = 0.1, seed: int = 0) -> HypernetworkStepSet:
    """One hypernetwork reused at all ``S`` steps."""
    net = Hypernetwork(HyperConfig(d_u, d_delta, tuple(layer_ids), rank, n_blocks, init_lambda),
                       seed=seed * 1000 + 1)
    return HypernetworkStepSet([net], S, shared=True)


# --------------------------------------------------------------------------
# meta-optimizer
# --------------------------------------------------------------------------

@dataclass
class UpdateReport:
    applied: bool
    grad_norm: float
    clipped: bool
    reason: str = ""


@dataclass
class MetaOptimizer:
    """Adam with global-norm clipping; skips the step on non-finite gradients."""

    lr: float
    max_norm: float = 1.0
    adam: nc.Adam = field(init=False)
    n_updates: int = 0
    n_skipped: int = 0

    def __post_init__(self):
        self.adam = nc.Adam(self.lr)

    def step(self, params: dict, grads: dict) -> UpdateReport:
        if set(grads) - set(params):
            raise ContractError(f"gradients for unknown parameters {sorted(set(grads) - set(params))[:3]}")
        sq = 0.0
        for k in sorted(grads):
            sq += float(np.sum(grads[k] * grads[k]))
        norm = math.sqrt(sq) if math.isfinite(sq) else float("inf")
        if not math.isfinite(norm) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.n_skipped += 1
            return UpdateReport(False, norm, False, "non-finite meta-gradient")
        clipped = norm > self.max_norm
        if clipped:
            scale = self.max_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
        self.adam.step(params, grads)
        self.n_updates += 1
        return UpdateReport(True, norm, clipped)

    def state_dict(self) -> dict:
        s = self.adam.state_dict()
        s["n_updates"] = self.n_updates
        s["n_skipped"] = self.n_skipped
        return s

    def load_state_dict(self, state: dict) -> None:
        self.adam.load_state_dict(state)
        self.n_updates = int(state["n_updates"])
        self.n_skipped = int(state["n_skipped"])


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= max_norm:
        return dict(grads)
    return {k: g * (max_norm / norm) for k, g in grads.items()}
