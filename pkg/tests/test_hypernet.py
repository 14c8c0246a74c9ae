import numpy as np
import pytest

from stepedit import numcore as nc
from stepedit.errors import CheckpointError, ConfigError, ContractError, ShapeError
from stepedit.hypernet import (HyperConfig, Hypernetwork, HypernetworkStepSet, MetaOptimizer,
                               build_shared, build_stepset, clip_by_global_norm, decayed_ranks,
                               residual_block, transform, transform_trace)

LIDS = ("a", "b")


def _net(rank=3, seed=0, d_u=4, d_delta=6):
    return Hypernetwork(HyperConfig(d_u, d_delta, LIDS, rank, 2), seed=seed)


def _randomize(net, rng):
    for k, v in net.params.items():
        net.params[k] = v + 0.3 * rng.normal(size=v.shape)
    return net


def test_identity_at_init(rng):
    net = _net()
    tr = nc.LayerTrace("a", rng.normal(size=(5, 4)), rng.normal(size=(5, 6)))
    pd, pu = transform_trace(net, tr)
    assert np.array_equal(pd, tr.delta)
    assert np.array_equal(pu, tr.u)


def test_zero_trace_gives_zero(rng):
    net = _net()
    pd, pu = transform_trace(net, nc.LayerTrace("b", np.zeros((3, 4)), np.zeros((3, 6))))
    assert not pd.any() and not pu.any()


def test_shape_preserving_after_training(rng):
    net = _randomize(_net(), rng)
    tr = nc.LayerTrace("a", rng.normal(size=(7, 4)), rng.normal(size=(7, 6)))
    pd, pu = transform_trace(net, tr)
    assert pd.shape == (7, 6) and pu.shape == (7, 4)
    assert not np.array_equal(pd, tr.delta)


def test_shape_and_layer_errors(rng):
    net = _net()
    with pytest.raises(ShapeError):
        transform_trace(net, nc.LayerTrace("a", rng.normal(size=(2, 5)), rng.normal(size=(2, 6))))
    with pytest.raises(ContractError):
        transform_trace(net, nc.LayerTrace("zzz", rng.normal(size=(2, 4)), rng.normal(size=(2, 6))))


def test_sq_norm_gradient_fd(rng):
    net = _randomize(_net(), rng)
    u, d = rng.normal(size=(3, 4)), rng.normal(size=(3, 6))

    def loss_for(params):
        tape = nc.Tape()
        nodes = {k: tape.param(v, k) for k, v in params.items()}
        pd, pu = transform(nodes, net.config, "b", u, d)
        return tape, nc.sq_norm(pd) + nc.sq_norm(pu)

    tape, loss = loss_for(net.params)
    grads = nc.backward(tape, loss).params
    for name in ("block0.down", "block1.up", "block0.scale.b", "block1.shift.b"):
        def f(x, name=name):
            p = dict(net.params)
            p[name] = x
            return float(loss_for(p)[1].value)
        assert nc.rel_error(grads[name], nc.finite_diff_grad(f, net.params[name])) < 1e-4
    # unused layer's gate receives no gradient
    assert not grads["block0.scale.a"].any()


def test_fused_block_matches_unfused(rng):
    """The fused block equals the op-by-op definition, values and gradients."""
    du, w, r = 3, 8, 4
    X, W1, W2 = rng.normal(size=(5, w)), rng.normal(size=(r, w)), rng.normal(size=(w, r))
    sc, sh = rng.normal(size=w), rng.normal(size=w)
    G = rng.normal(size=(5, w))

    def unfused(tape, x, a, b, c, s):
        xu, xd = nc.take_cols(x, 0, du), nc.take_cols(x, du, w)
        rms = lambda z: nc.power(nc.mean(z * z, axis=1, keepdims=True) + 1e-24, 0.5)
        ru, rd = rms(xu), rms(xd)
        xn = nc.concat_cols(nc.div(xu, ru), nc.div(xd, rd))
        o = nc.matmul(nc.gelu(nc.matmul(xn, a, transpose_b=True)), b, transpose_b=True) * c + s
        return x + nc.concat_cols(nc.take_cols(o, 0, du) * ru, nc.take_cols(o, du, w) * rd)

    results = []
    for fn in (lambda t, *a: residual_block(*a, du), unfused):
        tape = nc.Tape()
        args = [tape.param(v, n) for v, n in zip((X, W1, W2, sc, sh), "xabcs")]
        out = fn(tape, *args)
        g = nc.backward(tape, nc.reduce_sum(out * G)).params
        results.append((out.value, g))
    np.testing.assert_allclose(results[0][0], results[1][0], rtol=0, atol=1e-12)
    for k in "xabcs":
        assert nc.rel_error(results[0][1][k], results[1][1][k]) < 1e-10


class TestStepSet:
    def test_large_rank_halves(self):
        assert decayed_ranks(2, 1024) == [1024, 512]

    def test_single_step(self):
        assert build_stepset(1, 16, 4, 6, LIDS).ranks == [16]

    def test_floor_division(self):
        s = build_stepset(4, 16, 4, 6, LIDS)
        assert s.ranks == [16, 8, 5, 4]
        assert all(a >= b for a, b in zip(s.ranks, s.ranks[1:]))

    def test_consistent_rank_option(self):
        assert build_stepset(3, 16, 4, 6, LIDS, rank_decay=False).ranks == [16, 16, 16]

    def test_rank_too_small(self):
        with pytest.raises(ConfigError):
            build_stepset(4, 3, 4, 6, LIDS)

    def test_independent_params(self):
        s = build_stepset(2, 8, 4, 6, LIDS)
        assert s.nets[0].params is not s.nets[1].params
        assert not np.array_equal(s.nets[0].params["block0.down"][:4], s.nets[1].params["block0.down"][:4])
        assert set(s.flat_params()) >= {"f1.block0.down", "f2.block0.down"}

    def test_shared(self):
        s = build_shared(3, 8, 4, 6, LIDS)
        assert s.for_step(1) is s.for_step(3)
        assert s.prefix(2) == "f1."
        with pytest.raises(ContractError):
            s.for_step(4)

    def test_param_count_linear_in_rank(self):
        count = lambda r: _net(rank=r).n_params()
        assert count(8) - count(4) == count(4) - count(0)

    def test_save_load(self, tmp_path, rng):
        s = build_stepset(2, 8, 4, 6, LIDS)
        _randomize(s.nets[1], rng)
        back = HypernetworkStepSet.load(s.save(tmp_path / "h.npz"))
        assert back.ranks == s.ranks and back.shared == s.shared
        assert np.array_equal(back.flat_vector(), s.flat_vector())

    def test_load_wrong_kind(self, tmp_path):
        from stepedit import toylm

        p = toylm.ToyModel.init(toylm.ModelConfig(), 0).save(tmp_path / "m.npz")
        with pytest.raises(CheckpointError):
            HypernetworkStepSet.load(p)


class TestMetaOptimizer:
    def test_zero_grads(self, rng):
        p = {"w": rng.normal(size=(3,))}
        before = p["w"].copy()
        MetaOptimizer(1e-3).step(p, {"w": np.zeros(3)})
        assert np.max(np.abs(p["w"] - before)) <= 1e-12

    def test_clipping_to_unit_norm(self):
        g = {"a": np.array([6.0, 0.0]), "b": np.array([0.0, 8.0])}
        clipped = clip_by_global_norm(g, 1.0)
        norm = np.sqrt(sum(np.sum(v * v) for v in clipped.values()))
        assert norm == pytest.approx(1.0, abs=1e-12)
        rep = MetaOptimizer(1e-3).step({"a": np.zeros(2), "b": np.zeros(2)}, g)
        assert rep.clipped and rep.grad_norm == pytest.approx(10.0)

    def test_nonfinite_skipped(self):
        p = {"w": np.ones(2)}
        opt = MetaOptimizer(1e-3)
        rep = opt.step(p, {"w": np.array([np.nan, 1.0])})
        assert not rep.applied and opt.n_skipped == 1
        assert np.array_equal(p["w"], np.ones(2))

    def test_deterministic(self, rng):
        g = {"w": rng.normal(size=4)}
        outs = []
        for _ in range(2):
            p = {"w": np.ones(4)}
            MetaOptimizer(1e-2).step(p, g)
            outs.append(p["w"])
        assert np.array_equal(*outs)

    def test_unknown_param(self):
        with pytest.raises(ContractError):
            MetaOptimizer(1e-3).step({"w": np.ones(1)}, {"v": np.ones(1)})
