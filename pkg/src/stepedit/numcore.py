"""Dense numerics and a small eager reverse-mode autodiff tape.

Values are plain ``numpy`` arrays (row-major, float64 unless the tape is
built with another dtype).  Every op is evaluated immediately and appended to
the tape together with a closure computing its vector-Jacobian product, so
``backward`` is a single reverse sweep over the node list.

``linear`` is the one op that matters for editing: besides computing
``input @ weight.T`` it records the ``(input, output)`` node pair under a layer
id.  After ``backward`` the gradient of the output rows is exactly the
per-position ``delta`` that, together with the input rows ``u``, reassembles
the weight gradient as ``delta.T @ u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg as sla

from stepedit.errors import ContractError, NumericError, ShapeError

Matrix = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)


class Node:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "requires_grad", "name")

    def __init__(self, tape, index, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.index}{label}, shape={self.value.shape})"


@dataclass
class LayerTrace:
    """Per-position activations ``u`` and output gradients ``delta`` of one linear layer.

    Rows are positions.  ``delta.T @ u`` is the weight gradient.
    """

    layer_id: str
    u: Matrix
    delta: Matrix

    def __post_init__(self):
        if self.u.ndim != 2 or self.delta.ndim != 2 or self.u.shape[0] != self.delta.shape[0]:
            raise ShapeError(
                f"trace {self.layer_id}: u {self.u.shape} and delta {self.delta.shape} "
                "must be 2-D with equal row counts"
            )

    @property
    def n_positions(self) -> int:
        return self.u.shape[0]

    def gradient(self) -> Matrix:
        return self.delta.T @ self.u

    def select(self, rows) -> "LayerTrace":
        rows = np.asarray(rows, dtype=np.intp)
        return LayerTrace(self.layer_id, self.u[rows], self.delta[rows])


@dataclass
class Gradients:
    """Result of a backward sweep."""

    params: dict[str, Matrix] = field(default_factory=dict)
    traces: dict[str, LayerTrace] = field(default_factory=dict)
    nodes: list = field(default_factory=list, repr=False)

    def of(self, node: Node) -> Matrix:
        g = self.nodes[node.index]
        return np.zeros_like(node.value) if g is None else g


class Tape:
    """Ordered record of eagerly evaluated ops.

    A tape is single-threaded; build one per thread.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.linear_records: list[tuple[str, Node, Node]] = []
        self._param_names: set[str] = set()

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents=(), vjp=None, requires_grad=None, name=None) -> Node:
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, tuple(parents),
                    vjp if requires_grad else None, requires_grad, name)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._push(np.asarray(value, dtype=self.dtype), requires_grad=False)

    def param(self, value, name: str) -> Node:
        if name in self._param_names:
            raise ContractError(f"duplicate parameter name {name!r} on tape")
        self._param_names.add(name)
        arr = np.array(value, dtype=self.dtype, copy=True)
        return self._push(arr, requires_grad=True, name=name)

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.name is not None]

    def wrap(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractError("node belongs to a different tape")
            return x
        return self.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractError("at least one operand must be a tape node")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.wrap(a), tape.wrap(b)
    _broadcast_shape(a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return tape._push(a.value + b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.wrap(a), tape.wrap(b)
    _broadcast_shape(a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return tape._push(a.value - b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.wrap(a), tape.wrap(b)
    _broadcast_shape(a.value, b.value)
    av, bv = a.value, b.value
    return tape._push(av * bv, (a, b),
                      lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.wrap(a), tape.wrap(b)
    _broadcast_shape(a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return tape._push(out, (a, b),
                      lambda g: (_unbroadcast(g / bv, av.shape),
                                 _unbroadcast(-g * out / bv, bv.shape)))


def power(x: Node, p: float) -> Node:
    xv = x.value
    return x.tape._push(xv ** p, (x,), lambda g: (g * p * xv ** (p - 1),))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return x.tape._push(out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    xv = x.value
    return x.tape._push(np.log(xv), (x,), lambda g: (g / xv,))


def gelu(x: Node) -> Node:
    """Tanh-approximated GELU; smooth everywhere, ``gelu(0) == 0``."""
    xv = x.value
    x2 = xv * xv
    t = np.tanh(_GELU_C * xv * (1.0 + 0.044715 * x2))
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return x.tape._push(out, (x,), vjp)


# --------------------------------------------------------------------------
# reductions and reshaping
# --------------------------------------------------------------------------

def reduce_sum(x: Node, axis=None, keepdims=False) -> Node:
    shape = x.value.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._push(np.asarray(out), (x,), vjp)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sq_norm(x: Node) -> Node:
    """Sum of squared entries (squared Frobenius norm)."""
    xv = x.value
    return x.tape._push(np.asarray(np.sum(xv * xv)), (x,), lambda g: (2.0 * g * xv,))


def take_cols(x: Node, start: int, stop: int) -> Node:
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return x.tape._push(x.value[:, start:stop].copy(), (x,), vjp)


def concat_cols(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.wrap(a), tape.wrap(b)
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(f"concat_cols row mismatch: {a.value.shape} vs {b.value.shape}")
    k = a.value.shape[1]
    return tape._push(np.concatenate([a.value, b.value], axis=1), (a, b),
                      lambda g: (g[:, :k], g[:, k:]))


def transpose(x: Node) -> Node:
    return x.tape._push(x.value.T.copy(), (x,), lambda g: (g.T,))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b, transpose_b: bool = False) -> Node:
    """``a @ b`` (or ``a @ b.T`` when ``transpose_b``)."""
    tape = _tape_of(a, b)
    a, b = tape.wrap(a), tape.wrap(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    inner_b = bv.shape[1] if transpose_b else bv.shape[0]
    if av.shape[1] != inner_b:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}"
                         f"{'ᵀ' if transpose_b else ''}")
    if transpose_b:
        out = av @ bv.T
        vjp = lambda g: (g @ bv, g.T @ av)
    else:
        out = av @ bv
        vjp = lambda g: (g @ bv.T, av.T @ g)
    return tape._push(out, (a, b), vjp)


def linear(weight: Node, inp, layer_id: str | None = None) -> Node:
    """``inp @ weight.T`` with ``inp`` of shape (positions, d) and ``weight`` (d', d).

    When ``layer_id`` is given the input/output pair is recorded so that
    :func:`backward` can return a :class:`LayerTrace` for the layer.
    """
    tape = weight.tape
    inp = tape.wrap(inp)
    if inp.value.ndim != 2 or weight.value.ndim != 2 or inp.value.shape[1] != weight.value.shape[1]:
        raise ShapeError(f"linear: input {inp.value.shape} incompatible with weight {weight.value.shape}")
    out = matmul(inp, weight, transpose_b=True)
    if layer_id is not None:
        tape.linear_records.append((layer_id, inp, out))
    return out


def ls_solve(d_mat, u_mat, lam: Node) -> Node:
    """Ridge solution ``D Uᵀ (U Uᵀ + λI)⁻¹`` via a Cholesky factorization.

    ``d_mat`` is (d', b), ``u_mat`` (d, b) and must be constant, ``lam`` a
    positive scalar node.  Differentiable in ``d_mat`` and ``lam``.
    """
    tape = _tape_of(d_mat, lam)
    d_mat, lam, u_mat = tape.wrap(d_mat), tape.wrap(lam), tape.wrap(u_mat)
    if u_mat.requires_grad:
        raise ContractError("ls_solve: U must be constant")
    D, U = d_mat.value, u_mat.value
    if D.shape[1] != U.shape[1]:
        raise ShapeError(f"ls_solve: D {D.shape} and U {U.shape} column counts differ")
    if np.size(lam.value) != 1:
        raise ShapeError(f"ls_solve: lambda must be a scalar, got shape {np.shape(lam.value)}")
    lam_v = float(np.reshape(lam.value, ()))
    if not lam_v > 0:
        raise ContractError(f"ls_solve: lambda must be positive, got {lam_v}")
    A = U @ U.T + lam_v * np.eye(U.shape[0], dtype=U.dtype)
    try:
        factor = sla.cho_factor(A, lower=True, check_finite=True)
        out = sla.cho_solve(factor, U @ D.T, check_finite=True).T
    except (ValueError, sla.LinAlgError) as exc:
        raise NumericError(f"ls_solve factorization failed: {exc}") from exc

    def vjp(g):
        ainv_gt = sla.cho_solve(factor, g.T, check_finite=False)
        grad_d = ainv_gt.T @ U
        delta_ainv = sla.cho_solve(factor, out.T, check_finite=False).T
        grad_lam = -np.sum(g * delta_ainv)
        return grad_d, np.asarray(grad_lam).reshape(lam.value.shape), None

    return tape._push(out, (d_mat, lam, u_mat), vjp)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def log_softmax(x: Node) -> Node:
    """Row-wise log-softmax."""
    xv = x.value
    shifted = xv - xv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return x.tape._push(out, (x,),
                        lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax_xent(logits: Node, targets) -> Node:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    lv = logits.value
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (lv.shape[0],):
        raise ShapeError(f"softmax_xent: {targets.shape[0] if targets.ndim else 0} targets "
                         f"for {lv.shape[0]} rows")
    n = lv.shape[0]
    shifted = lv - lv.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return logits.tape._push(np.asarray(loss), (logits,), vjp)


def kl_rows(ref_logits, logits: Node) -> Node:
    """Mean over rows of ``KL(softmax(ref) || softmax(logits))``."""
    tape = _tape_of(ref_logits, logits)
    ref_logits = tape.wrap(ref_logits)
    lp = log_softmax(ref_logits)
    lq = log_softmax(logits)
    p = exp(lp)
    return mean(reduce_sum(p * (lp - lq), axis=1))


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def backward_from(tape: Tape, seeds: dict) -> Gradients:
    """Reverse sweep seeded with ``{node: upstream gradient}``.

    Does not mutate the tape, so repeated calls give identical results.
    """
    grads: list = [None] * len(tape.nodes)
    start = -1
    for node, g in seeds.items():
        if node.tape is not tape:
            raise ContractError("seed node belongs to a different tape")
        g = np.asarray(g, dtype=node.value.dtype)
        if g.shape != node.value.shape:
            raise ShapeError(f"seed gradient {g.shape} does not match node {node.value.shape}")
        grads[node.index] = g if grads[node.index] is None else grads[node.index] + g
        start = max(start, node.index)

    for i in range(start, -1, -1):
        node = tape.nodes[i]
        g = grads[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            j = parent.index
            grads[j] = pg if grads[j] is None else grads[j] + pg

    result = Gradients(nodes=grads)
    for node in tape.nodes:
        if node.name is not None:
            g = grads[node.index]
            result.params[node.name] = np.zeros_like(node.value) if g is None else g
    for layer_id, inp, out in tape.linear_records:
        delta = grads[out.index]
        if delta is None:
            delta = np.zeros_like(out.value)
        trace = LayerTrace(layer_id, inp.value, delta)
        if layer_id in result.traces:
            prev = result.traces[layer_id]
            trace = LayerTrace(layer_id, np.vstack([prev.u, trace.u]),
                               np.vstack([prev.delta, trace.delta]))
        result.traces[layer_id] = trace
    return result


def backward(tape: Tape, loss: Node) -> Gradients:
    """Gradients of a scalar ``loss`` w.r.t. every named parameter, plus layer traces."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    return backward_from(tape, {loss: np.ones_like(loss.value)})


# --------------------------------------------------------------------------
# utilities
# --------------------------------------------------------------------------

def finite_diff_grad(fn: Callable[[Matrix], float], point: Matrix, eps: float = 1e-5) -> Matrix:
    """Central-difference gradient estimate of a scalar function."""
    if not eps > 0:
        raise ContractError("eps must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite function value near entry {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream (stable across platforms for a fixed numpy)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def rel_error(a, b) -> float:
    """Relative Frobenius error ``‖a - b‖ / max(‖b‖, tiny)``."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{name} contains non-finite values")


class Adam:
    """Adam over a dict of named arrays.  State is plain arrays so it checkpoints cleanly."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
