import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepedit import editengine as ee
from stepedit import numcore as nc
from stepedit import toylm
from stepedit.errors import ContractError, NumericError, ShapeError
from stepedit.hypernet import build_shared, build_stepset


def _nets(model, S=1, rank=8, shared=True):
    shape = model.weights[model.editable_set[0]].shape
    build = build_shared if shared else build_stepset
    return build(S, rank, shape[1], shape[0], model.editable_set)


class TestCapture:
    def test_one_row_per_single_token_answer(self, model, small_corpus):
        cap = ee.capture_traces(model.weights, model.config, [small_corpus[0].edit])
        for lid in model.editable_set:
            assert cap.traces[lid].n_positions == 1

    def test_matches_autodiff(self, model, small_corpus):
        pairs = [s.edit for s in small_corpus.samples[:5]]
        cap = ee.capture_traces(model.weights, model.config, pairs)
        enc = toylm.encode_pairs(pairs, model.vocab_size)
        tape = nc.Tape()
        nodes = toylm.weight_nodes(tape, model.weights, model.editable_set)
        loss = nc.softmax_xent(toylm.forward_rows(tape, nodes, enc.mix, model.config, record=False), enc.targets)
        g = nc.backward(tape, loss).params
        for lid in model.editable_set:
            assert nc.rel_error(cap.traces[lid].gradient(), g[lid]) < 1e-9

    def test_deterministic(self, model, small_corpus):
        pairs = [s.edit for s in small_corpus.samples[:3]]
        a = ee.capture_traces(model.weights, model.config, pairs)
        b = ee.capture_traces(model.weights, model.config, pairs)
        for lid in a.traces:
            assert np.array_equal(a.traces[lid].delta, b.traces[lid].delta)

    def test_empty_batch(self, model):
        with pytest.raises(ContractError):
            ee.capture_traces(model.weights, model.config, [])


class TestRank1:
    def test_outer_product(self):
        d = ee.rank1_delta({"l": (np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]]))}, lr=1.0)
        np.testing.assert_array_equal(d.deltas["l"], [[0.0, -2.0], [0.0, 0.0]])

    def test_zero(self):
        d = ee.rank1_delta({"l": (np.zeros((3, 2)), np.zeros((3, 4)))}, lr=0.5)
        assert not d.deltas["l"].any()

    def test_identity_net_is_gradient_step(self, model, small_corpus):
        pairs = [s.edit for s in small_corpus.samples[:4]]
        cap = ee.capture_traces(model.weights, model.config, pairs)
        net = _nets(model).for_step(1)
        d = ee.compute_delta(net, cap.traces, 0.1, "rank1")
        for lid in model.editable_set:
            np.testing.assert_allclose(d.deltas[lid], -0.1 * cap.traces[lid].gradient(), rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ee.rank1_delta({"l": (np.zeros((3, 2)), np.zeros((2, 4)))}, lr=1.0)


class TestLeastSquares:
    def test_zero_target(self, rng):
        agg = ee.AggregationInput({"l": np.zeros((3, 2))}, {"l": rng.normal(size=(4, 2))}, {"l": 0.3})
        assert not ee.ls_aggregate(agg).deltas["l"].any()

    def test_hand_example(self):
        agg = ee.AggregationInput({"l": np.array([[2.0], [3.0]])}, {"l": np.array([[1.0], [0.0]])}, {"l": 1.0})
        np.testing.assert_allclose(ee.ls_aggregate(agg).deltas["l"], [[1.0, 0.0], [1.5, 0.0]], atol=1e-15)

    def test_beats_perturbations(self, rng):
        D, U, lam = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), 0.5
        delta = ee.ridge_solve(D, U, lam)
        best = ee.ridge_objective(delta, D, U, lam)
        for _ in range(1000):
            pert = delta + rng.normal(scale=rng.choice([1e-4, 1e-2, 1.0]), size=delta.shape)
            assert ee.ridge_objective(pert, D, U, lam) >= best

    def test_contract(self, rng):
        with pytest.raises(ContractError):
            ee.AggregationInput({"l": np.zeros((3, 2))}, {"l": np.zeros((4, 2))}, {"l": 0.0})
        with pytest.raises(ShapeError):
            ee.AggregationInput({"l": np.zeros((3, 2))}, {"l": np.zeros((4, 3))}, {"l": 1.0})

    def test_nonfinite_input(self):
        with pytest.raises(NumericError):
            ee.ridge_solve(np.ones((2, 1)), np.array([[np.nan], [1.0]]), 1.0)

    def test_aggregation_input_columns(self, rng):
        pd, pu, u = rng.normal(size=(3, 5)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        agg = ee.aggregation_input({"l": (pd, pu)}, {"l": u}, {"l": 0.1}, lr=0.5)
        for k in range(3):
            np.testing.assert_allclose(agg.D["l"][:, k], -0.5 * pd[k] * (pu[k] @ u[k]), atol=1e-14)
        np.testing.assert_array_equal(agg.U["l"], u.T)

    def test_tape_version_matches_numeric(self, model, small_corpus):
        pairs = [s.edit for s in small_corpus.samples[:6]]
        cap = ee.capture_traces(model.weights, model.config, pairs)
        net = _nets(model).for_step(1)
        d = ee.compute_delta(net, cap.traces, 0.1, "least_squares")
        pseudo = {lid: (tr.delta, tr.u) for lid, tr in cap.traces.items()}
        agg = ee.aggregation_input(pseudo, {lid: tr.u for lid, tr in cap.traces.items()},
                                   {lid: 0.1 for lid in cap.traces}, lr=0.1)
        ref = ee.ls_aggregate(agg)
        for lid in cap.traces:
            assert nc.rel_error(d.deltas[lid], ref.deltas[lid]) < 1e-12


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 8), dp=st.integers(1, 8), b=st.integers(1, 5),
       lam=st.floats(1e-3, 10.0), seed=st.integers(0, 2**31))
def test_normal_equations_property(d, dp, b, lam, seed):
    r = np.random.default_rng(seed)
    D, U = r.normal(size=(dp, b)), r.normal(size=(d, b))
    delta = ee.ridge_solve(D, U, lam)
    lhs = delta @ (U @ U.T + lam * np.eye(d))
    assert nc.rel_error(lhs, D @ U.T) < 1e-8 or np.linalg.norm(D @ U.T) < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), l1=st.floats(1e-3, 10.0), l2=st.floats(1e-3, 10.0))
def test_shrinkage_property(seed, l1, l2):
    r = np.random.default_rng(seed)
    D, U = r.normal(size=(5, 3)), r.normal(size=(4, 3))
    lo, hi = sorted((l1, l2))
    assert np.linalg.norm(ee.ridge_solve(D, U, hi)) <= np.linalg.norm(ee.ridge_solve(D, U, lo)) + 1e-12


class TestApply:
    def test_zero_delta_bitwise(self, model):
        before = toylm.model_forward(model, [40, 1])
        ee.apply_delta(model, ee.WeightDelta({k: np.zeros_like(model.weights[k]) for k in model.editable_set}))
        assert np.array_equal(toylm.model_forward(model, [40, 1]), before)

    def test_inverse(self, model, rng):
        orig = {k: v.copy() for k, v in model.weights.items()}
        d = ee.WeightDelta({k: rng.normal(size=model.weights[k].shape) for k in model.editable_set})
        ee.apply_delta(model, d)
        ee.apply_delta(model, -d)
        for k in orig:
            np.testing.assert_allclose(model.weights[k], orig[k], rtol=0, atol=1e-12)

    def test_scoping(self, model, rng):
        with pytest.raises(ContractError):
            ee.apply_delta(model, ee.WeightDelta({"blocks.0.fc_out": np.zeros((32, 128))}))
        frozen = {k: model.weights[k].copy() for k in model.weights if k not in model.editable_set}
        ee.apply_delta(model, ee.WeightDelta({"blocks.1.fc_in": rng.normal(size=(128, 32))}))
        for k, v in frozen.items():
            assert np.array_equal(model.weights[k], v)

    def test_delta_invariants(self):
        d = ee.WeightDelta({"l": np.array([[3.0, 4.0]])}, step=2)
        assert d.frobenius_norms["l"] == 5.0
        with pytest.raises(NumericError):
            ee.WeightDelta({"l": np.array([[np.inf]])})


class TestMbpsEdit:
    def test_s1_identity_is_finetune_step(self, model, small_corpus):
        batch = small_corpus.samples[:5]
        ref = ee.fine_tune_step(model, [s.edit for s in batch], lr=0.05)
        res = ee.mbps_edit(model, batch, _nets(model), S=1, aggregation="rank1", lr=0.05)
        for k in model.editable_set:
            assert np.max(np.abs(res.weights[k] - ref[k])) <= 1e-12

    def test_delta_count_and_losses(self, model, small_corpus):
        nets = _nets(model, S=3, shared=False)
        res = ee.mbps_edit(model, small_corpus.samples[:4], nets, aggregation="least_squares", lr=1e-2)
        assert len(res.deltas) == 3 and [d.step for d in res.deltas] == [1, 2, 3]
        assert len(res.step_losses) == 4

    def test_commit_semantics(self, model, small_corpus):
        before = {k: v.copy() for k, v in model.weights.items()}
        ee.mbps_edit(model, small_corpus.samples[:2], _nets(model), S=1, commit=False)
        assert all(np.array_equal(model.weights[k], before[k]) for k in before)
        ee.mbps_edit(model, small_corpus.samples[:2], _nets(model), S=1)
        assert any(not np.array_equal(model.weights[k], before[k]) for k in model.editable_set)

    def test_untrained_steps_descend(self, model, small_corpus):
        res = ee.mbps_edit(model, small_corpus.samples[:5], _nets(model, S=2), S=2, aggregation="rank1", lr=0.05)
        assert res.step_losses[2] < res.step_losses[1] < res.step_losses[0]

    def test_too_many_steps(self, model, small_corpus):
        with pytest.raises(ContractError):
            ee.mbps_edit(model, small_corpus.samples[:2], _nets(model, S=2), S=3)

    def test_nonfinite_aborts_without_commit(self, model, small_corpus):
        nets = _nets(model)
        nets.nets[0].params["block0.shift.blocks.0.fc_in"][:] = np.nan
        before = {k: v.copy() for k, v in model.weights.items()}
        with pytest.raises(NumericError):
            ee.mbps_edit(model, small_corpus.samples[:2], nets, S=1)
        assert all(np.array_equal(model.weights[k], before[k]) for k in before)

    def test_delta_dump(self, model, small_corpus):
        res = ee.mbps_edit(model, small_corpus.samples[:2], _nets(model, S=2), S=2, commit=False)
        rows = ee.delta_dump_rows(res.deltas)
        assert len(rows) == 4
        assert set(rows[0]) == {"layer_id", "step", "frobenius_norm"}
