import math

import numpy as np
import pytest

from stepedit import numcore as nc
from stepedit import toylm
from stepedit.errors import CheckpointError, ContractError, InputError


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


class TestForward:
    def test_zero_embedding_gives_uniform(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(vocab_size=8, dim=4), 0)
        m.weights["embed"] = np.zeros_like(m.weights["embed"])
        logits = toylm.model_forward(m, [1, 2, 3])
        p = np.exp(toylm.log_softmax(logits))
        np.testing.assert_allclose(p, np.full((3, 8), 1 / 8), atol=1e-15)

    def test_deterministic(self):
        a = toylm.ToyModel.init(toylm.ModelConfig(), 5)
        b = toylm.ToyModel.init(toylm.ModelConfig(), 5)
        assert np.array_equal(toylm.model_forward(a, [1, 2, 3]), toylm.model_forward(b, [1, 2, 3]))

    def test_hand_rolled_single_block(self):
        cfg = toylm.ModelConfig(vocab_size=2, dim=2, n_blocks=1, hidden_mult=1)
        E = np.array([[0.5, -1.0], [2.0, 0.25]])
        Wi = np.array([[1.0, -0.5], [0.3, 0.7]])
        Wo = np.array([[0.2, 0.1], [-0.4, 0.9]])
        m = toylm.ToyModel(cfg, {"embed": E, "blocks.0.fc_in": Wi, "blocks.0.fc_out": Wo})
        tokens = [1, 0]
        expected = []
        for t in range(2):
            h = np.mean(E[tokens[: t + 1]], axis=0)
            h = h + Wo @ _gelu(Wi @ h)
            expected.append(E @ h)
        np.testing.assert_allclose(toylm.model_forward(m, tokens), np.array(expected), rtol=0, atol=1e-12)

    def test_out_of_vocab(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(vocab_size=8, dim=4), 0)
        with pytest.raises(InputError):
            toylm.model_forward(m, [8])
        with pytest.raises(InputError):
            toylm.model_forward(m, [-1])

    def test_default_sizes(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 0)
        assert m.editable_set == ("blocks.0.fc_in", "blocks.1.fc_in")
        assert 10_000 < m.n_params() < 60_000

    def test_bad_editable(self):
        with pytest.raises(ContractError):
            toylm.ToyModel.init(toylm.ModelConfig(editable=("nope",)), 0)


class TestNll:
    def test_uniform(self):
        assert toylm.nll_loss(np.zeros((1, 4)), [2], [True]) == pytest.approx(math.log(4), abs=1e-12)

    def test_certain(self):
        logits = np.zeros((1, 4))
        logits[0, 1] = 20.0
        assert toylm.nll_loss(logits, [1], [True]) <= 1e-6

    def test_matches_per_position(self, rng):
        logits = rng.normal(size=(3, 5))
        targets = [4, 0, 2]
        mask = [True, False, True]
        manual = []
        for r in (0, 2):
            z = logits[r]
            manual.append(-(z[targets[r]] - math.log(sum(math.exp(v) for v in z))))
        assert toylm.nll_loss(logits, targets, mask) == pytest.approx(np.mean(manual), abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(ContractError):
            toylm.nll_loss(np.zeros((2, 3)), [0, 1], [False, False])


class TestSnapshot:
    def test_round_trip_bitwise(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 1)
        before = toylm.model_forward(m, [3, 4, 5])
        snap = m.snapshot("W0")
        for k in m.editable_set:
            m.weights[k] = m.weights[k] + 0.1
        assert not np.array_equal(toylm.model_forward(m, [3, 4, 5]), before)
        m.restore(snap)
        assert np.array_equal(toylm.model_forward(m, [3, 4, 5]), before)

    def test_edits_move_weights(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 1)
        snap = m.snapshot()
        for _ in range(5):
            m.weights["blocks.0.fc_in"] = m.weights["blocks.0.fc_in"] + 0.01
        drift = sum(np.linalg.norm(m.weights[k] - snap[k]) for k in snap.keys())
        assert drift > 0

    def test_snapshots_equal(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 1)
        assert m.snapshot().equals(m.snapshot())

    def test_immutable(self):
        snap = toylm.ToyModel.init(toylm.ModelConfig(), 1).snapshot()
        with pytest.raises(ValueError):
            snap["blocks.0.fc_in"][0, 0] = 1.0

    def test_key_mismatch(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 1)
        other = toylm.ToyModel.init(toylm.ModelConfig(editable=("blocks.0.fc_in",)), 1)
        with pytest.raises(ContractError):
            m.restore(other.snapshot())


class TestDecode:
    def test_overfit_single_fact(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(vocab_size=16, dim=8), 0)
        rep = toylm.fit(m, [((3, 4), (9,))], steps=500, lr=5e-2, check_every=10)
        assert rep.accuracy == 1.0
        assert toylm.argmax_decode(m, [3, 4], 1) == [9]

    def test_uniform_model_returns_zeros(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(vocab_size=8, dim=4), 0)
        m.weights["embed"] = np.zeros_like(m.weights["embed"])
        assert toylm.argmax_decode(m, [1, 2], 3) == [0, 0, 0]

    def test_deterministic(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 2)
        assert toylm.argmax_decode(m, [5, 6], 2) == toylm.argmax_decode(m, [5, 6], 2)

    def test_batch_matches_single(self):
        m = toylm.ToyModel.init(toylm.ModelConfig(), 2)
        pairs = [((5, 6), (7,)), ((1, 2, 3), (4,))]
        pairs = [(x, tuple(toylm.argmax_decode(m, x, 1))) for x, _ in pairs] + pairs
        flags = toylm.batch_decode(m.weights, m.config, pairs)
        assert flags[:2].all()
        for (x, y), f in zip(pairs, flags):
            assert f == (toylm.argmax_decode(m, x, len(y)) == list(y))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = toylm.ToyModel.init(toylm.ModelConfig(vocab_size=40, dim=8, editable=("blocks.1.fc_in",)), 4)
        path = m.save(tmp_path / "m.npz")
        back = toylm.ToyModel.load(path)
        assert back.config == m.config
        assert np.array_equal(toylm.model_forward(back, [1, 2]), toylm.model_forward(m, [1, 2]))
        assert back.fingerprint() == m.fingerprint()

    def test_corrupt(self, tmp_path):
        p = tmp_path / "m.npz"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            toylm.ToyModel.load(p)


def test_editing_only_touches_editable(model):
    before = {k: v.copy() for k, v in model.weights.items()}
    cap_pairs = [((40, 0), (12,))]
    new = toylm.fit(model, cap_pairs, steps=3, lr=1e-2, names=model.editable_set)
    assert new.steps == 3
    for k in model.weights:
        if k in model.editable_set:
            assert not np.array_equal(model.weights[k], before[k])
        else:
            assert np.array_equal(model.weights[k], before[k])
