import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepedit import numcore as nc
from stepedit.errors import ContractError, NumericError, ShapeError


def _two_layer(rng, d0=5, d1=7, d2=3, n=4):
    W1 = rng.normal(size=(d1, d0))
    W2 = rng.normal(size=(d2, d1))
    X = rng.normal(size=(n, d0))
    T = rng.normal(size=(n, d2))
    return W1, W2, X, T


def _two_layer_loss(W1, W2, X, T):
    tape = nc.Tape()
    w1, w2 = tape.param(W1, "w1"), tape.param(W2, "w2")
    h = nc.gelu(nc.linear(w1, X, "l1"))
    out = nc.linear(w2, h, "l2")
    loss = nc.sq_norm(out - T) * 0.5
    return tape, loss


class TestLinear:
    def test_identity_weight(self):
        tape = nc.Tape()
        out = nc.linear(tape.param(np.eye(2), "w"), np.array([[3.0, 4.0]]))
        np.testing.assert_array_equal(out.value, [[3.0, 4.0]])

    def test_hand_multiply(self):
        tape = nc.Tape()
        out = nc.linear(tape.param(np.array([[1.0, 2.0], [3.0, 4.0]]), "w"), np.array([[1.0, 0.0]]))
        np.testing.assert_array_equal(out.value, [[1.0, 3.0]])

    def test_zero_weight(self, rng):
        tape = nc.Tape()
        out = nc.linear(tape.param(np.zeros((2, 2)), "w"), rng.normal(size=(5, 2)))
        np.testing.assert_array_equal(out.value, np.zeros((5, 2)))

    def test_shape_mismatch(self):
        tape = nc.Tape()
        with pytest.raises(ShapeError):
            nc.linear(tape.param(np.zeros((2, 3)), "w"), np.zeros((1, 2)))

    def test_records_trace_input(self, rng):
        tape = nc.Tape()
        X = rng.normal(size=(3, 2))
        nc.linear(tape.param(rng.normal(size=(4, 2)), "w"), X, "layer")
        (lid, inp, _), = tape.linear_records
        assert lid == "layer"
        np.testing.assert_array_equal(inp.value, X)


class TestBackward:
    def test_constant_loss_zero_grads(self, rng):
        tape = nc.Tape()
        w = tape.param(rng.normal(size=(2, 2)), "w")
        loss = nc.reduce_sum(w * 0.0) + 3.0
        g = nc.backward(tape, loss)
        np.testing.assert_array_equal(g.params["w"], np.zeros((2, 2)))

    def test_nonscalar_loss_rejected(self, rng):
        tape = nc.Tape()
        w = tape.param(rng.normal(size=(2, 2)), "w")
        with pytest.raises(ContractError):
            nc.backward(tape, w * 2.0)

    def test_single_linear_squared_loss_fd(self, rng):
        W = rng.normal(size=(2, 2))
        X = rng.normal(size=(2, 2))

        def f(w):
            return 0.5 * float(np.sum((X @ w.T) ** 2))

        tape = nc.Tape()
        loss = nc.sq_norm(nc.linear(tape.param(W, "w"), X)) * 0.5
        g = nc.backward(tape, loss).params["w"]
        assert nc.rel_error(g, nc.finite_diff_grad(f, W)) < 1e-6

    def test_two_layer_trace_decomposition(self, rng):
        W1, W2, X, T = _two_layer(rng)
        tape, loss = _two_layer_loss(W1, W2, X, T)
        g = nc.backward(tape, loss)
        assert nc.rel_error(g.traces["l1"].gradient(), g.params["w1"]) < 1e-9
        assert nc.rel_error(g.traces["l2"].gradient(), g.params["w2"]) < 1e-9
        assert g.traces["l1"].n_positions == X.shape[0]

    def test_two_layer_fd(self, rng):
        W1, W2, X, T = _two_layer(rng)
        tape, loss = _two_layer_loss(W1, W2, X, T)
        g = nc.backward(tape, loss).params
        f1 = lambda w: float(_two_layer_loss(w, W2, X, T)[1].value)
        f2 = lambda w: float(_two_layer_loss(W1, w, X, T)[1].value)
        assert nc.rel_error(g["w1"], nc.finite_diff_grad(f1, W1)) < 1e-4
        assert nc.rel_error(g["w2"], nc.finite_diff_grad(f2, W2)) < 1e-4

    def test_backward_is_pure(self, rng):
        tape, loss = _two_layer_loss(*_two_layer(rng))
        a = nc.backward(tape, loss)
        b = nc.backward(tape, loss)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_backward_from_seed_shape(self, rng):
        tape = nc.Tape()
        w = tape.param(rng.normal(size=(2, 3)), "w")
        y = w * 2.0
        with pytest.raises(ShapeError):
            nc.backward_from(tape, {y: np.ones((3, 2))})
        g = nc.backward_from(tape, {y: np.ones((2, 3))})
        np.testing.assert_array_equal(g.params["w"], 2.0 * np.ones((2, 3)))

    def test_duplicate_param_name(self):
        tape = nc.Tape()
        tape.param(np.zeros(2), "a")
        with pytest.raises(ContractError):
            tape.param(np.zeros(2), "a")

    def test_cross_tape_rejected(self):
        a, b = nc.Tape(), nc.Tape()
        x = a.param(np.ones(2), "x")
        with pytest.raises(ContractError):
            b.wrap(x)


class TestOpsGradients:
    """Every op against central differences on random inputs."""

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcast_binary(self, op, rng):
        A = rng.normal(size=(3, 4))
        B = rng.uniform(0.5, 2.0, size=(1, 4))
        fn = getattr(nc, op)
        ref = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[op]
        G = rng.normal(size=(3, 4))
        tape = nc.Tape()
        a, b = tape.param(A, "a"), tape.param(B, "b")
        g = nc.backward(tape, nc.reduce_sum(fn(a, b) * G)).params
        assert nc.rel_error(g["a"], nc.finite_diff_grad(lambda x: np.sum(ref(x, B) * G), A)) < 1e-6
        assert nc.rel_error(g["b"], nc.finite_diff_grad(lambda x: np.sum(ref(A, x) * G), B)) < 1e-6

    @pytest.mark.parametrize("name", ["gelu", "exp", "log", "power", "log_softmax"])
    def test_unary(self, name, rng):
        X = rng.uniform(0.3, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        if name in ("log", "power"):
            X = np.abs(X)
        G = rng.normal(size=(3, 4))
        ops = {"gelu": nc.gelu, "exp": nc.exp, "log": nc.log, "power": lambda x: nc.power(x, 1.5),
               "log_softmax": nc.log_softmax}

        def f(x):
            t = nc.Tape()
            return float(nc.reduce_sum(ops[name](t.const(x)) * G).value)

        tape = nc.Tape()
        x = tape.param(X, "x")
        g = nc.backward(tape, nc.reduce_sum(ops[name](x) * G)).params["x"]
        assert nc.rel_error(g, nc.finite_diff_grad(f, X)) < 1e-6

    def test_matmul_transpose_flag(self, rng):
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        tape = nc.Tape()
        out = nc.matmul(tape.param(A, "a"), tape.param(B, "b"), transpose_b=True)
        np.testing.assert_allclose(out.value, A @ B.T, rtol=0, atol=1e-14)

    def test_ls_solve_grads(self, rng):
        D, U = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
        G = rng.normal(size=(3, 4))
        lam0 = 0.7

        def f(d, lam):
            A = U @ U.T + lam * np.eye(4)
            return float(np.sum(D_solve(d, A) * G))

        def D_solve(d, A):
            return np.linalg.solve(A, U @ d.T).T

        tape = nc.Tape()
        d, lam = tape.param(D, "d"), tape.param(np.asarray(lam0), "lam")
        g = nc.backward(tape, nc.reduce_sum(nc.ls_solve(d, U, lam) * G)).params
        assert nc.rel_error(g["d"], nc.finite_diff_grad(lambda x: f(x, lam0), D)) < 1e-6
        fd_lam = (f(D, lam0 + 1e-6) - f(D, lam0 - 1e-6)) / 2e-6
        assert abs(float(g["lam"]) - fd_lam) < 1e-6 * max(1.0, abs(fd_lam))

    def test_softmax_xent_matches_analytic(self, rng):
        logits = rng.normal(size=(1, 3))
        target = np.array([2])
        tape = nc.Tape()
        x = tape.param(logits, "x")
        g = nc.backward(tape, nc.softmax_xent(x, target)).params["x"]
        p = np.exp(logits) / np.exp(logits).sum()
        onehot = np.eye(3)[[2]]
        np.testing.assert_allclose(g, p - onehot, atol=1e-12)

    def test_kl_rows_zero_for_identical(self, rng):
        L = rng.normal(size=(4, 5))
        tape = nc.Tape()
        assert abs(float(nc.kl_rows(L, tape.param(L, "x")).value)) < 1e-15


class TestFiniteDiff:
    def test_sum_gives_ones(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_allclose(nc.finite_diff_grad(np.sum, x), np.ones((2, 3)), atol=1e-9)

    def test_half_square(self):
        g = nc.finite_diff_grad(lambda x: 0.5 * float(np.sum(x * x)), np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(g, [[1.0, 2.0]], atol=1e-8)

    def test_softmax_xent_analytic(self, rng):
        z = rng.normal(size=3)

        def f(v):
            return float(-(v[0] - np.log(np.sum(np.exp(v)))))

        p = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(nc.finite_diff_grad(f, z), p - np.eye(3)[0], atol=1e-6)

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ContractError):
            nc.finite_diff_grad(np.sum, np.zeros(2), eps=0.0)

    def test_nonfinite_raises(self):
        with pytest.raises(NumericError), np.errstate(invalid="ignore", divide="ignore"):
            nc.finite_diff_grad(lambda x: float(np.log(x[0])), np.array([0.0]))


class TestRng:
    def test_same_seed_same_draws(self):
        assert np.array_equal(nc.seeded_rng(0).random(100), nc.seeded_rng(0).random(100))

    def test_seed_sensitivity(self):
        assert not np.array_equal(nc.seeded_rng(0).random(100), nc.seeded_rng(1).random(100))

    def test_normal_moments(self):
        x = nc.seeded_rng(0).normal(size=100_000)
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.05


class TestAdam:
    def test_zero_grads_leave_params(self, rng):
        p = {"w": rng.normal(size=(3, 3))}
        before = p["w"].copy()
        opt = nc.Adam(1e-3)
        opt.step(p, {"w": np.zeros((3, 3))})
        assert np.max(np.abs(p["w"] - before)) <= 1e-12

    def test_state_round_trip(self, rng):
        p1 = {"w": rng.normal(size=4)}
        p2 = {"w": p1["w"].copy()}
        g = {"w": rng.normal(size=4)}
        a = nc.Adam(1e-2)
        a.step(p1, g)
        b = nc.Adam(1e-2)
        b.load_state_dict(a.state_dict())
        p2["w"] = p1["w"].copy()
        a.step(p1, g)
        b.step(p2, g)
        assert np.array_equal(p1["w"], p2["w"])


def test_float32_tape():
    tape = nc.Tape(np.float32)
    w = tape.param(np.ones((2, 2)), "w")
    assert w.value.dtype == np.float32
    assert nc.linear(w, np.ones((1, 2), dtype=np.float32)).value.dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(d_in=st.integers(1, 8), d_out=st.integers(1, 8), n=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_trace_decomposition_property(d_in, d_out, n, seed):
    r = np.random.default_rng(seed)
    W1, W2, X, T = _two_layer(r, d_in, d_out, 2, n)
    tape, loss = _two_layer_loss(W1, W2, X, T)
    g = nc.backward(tape, loss)
    for lid, name in (("l1", "w1"), ("l2", "w2")):
        ref = g.params[name]
        if np.linalg.norm(ref) > 1e-12:
            assert nc.rel_error(g.traces[lid].gradient(), ref) < 1e-9
