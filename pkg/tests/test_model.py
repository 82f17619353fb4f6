import numpy as np
import pytest

from multiloss.autodiff import Tensor
from multiloss.losses import head_probs
from multiloss.model import MultiHeadModel, PredictionSet, build
from multiloss.nn import LayerStack, reference_architecture

X = np.random.default_rng(0).random((7, 5))


def test_single_head_equals_plain_network():
    model = build("small-mlp", "last_block", 3, ["softmax"], seed=11, input_shape=(5,))
    plain = LayerStack(reference_architecture("small-mlp", (5,), 3).layers)
    plain.init_params(11)
    mine = model.state_dict()
    theirs = plain.state_dict()
    assert len(mine) == len(theirs)
    for name, value in theirs.items():
        key = ("trunk/" if int(name.split(".")[0]) < model.split_index else "head0/") + name
        assert mine[key].tobytes() == value.tobytes()
    ref = head_probs("softmax", plain.forward(Tensor(X)), 3).data
    np.testing.assert_array_equal(model.predict(X).per_head[:, 0], ref)


def test_heads_differ_under_one_seed():
    model = build("small-mlp", "last_block", 3, ["softmax"] * 4, seed=0, input_shape=(5,))
    ws = [h.parameters()[0].data for h in model.heads]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(ws[i], ws[j])


def test_cnn_last_block_split():
    model = build("small-cnn", "last_block", 10, ["softmax", "mse"], seed=0, input_shape=(1, 8, 8))
    assert {l.kind for l in model.trunk.layers} <= {"conv2d", "relu", "dropout", "maxpool"}
    assert any(l.kind == "conv2d" for l in model.trunk.layers)
    for head in model.heads:
        assert not any(l.kind == "conv2d" for l in head.layers)
        assert sum(l.kind == "dense" for l in head.layers) == 2


def test_relaxed_head_is_one_wider():
    model = build("small-mlp", "last_block", 3, ["relaxed_softmax", "softmax"], seed=0, input_shape=(5,))
    raws = model.head_outputs(X)
    assert raws[0].shape == (7, 4) and raws[1].shape == (7, 3)


def test_averaged_is_mean():
    ps = PredictionSet(np.array([[0.6, 0.4], [0.4, 0.6]]))
    np.testing.assert_allclose(ps.averaged, [0.5, 0.5])


def test_identical_heads_average_to_each_row():
    model = build("small-mlp", "last_block", 3, ["softmax"] * 3, seed=0, input_shape=(5,))
    for h in model.heads[1:]:
        h.load_state_dict(model.heads[0].state_dict())
    ps = model.predict(X)
    for j in range(3):
        np.testing.assert_array_equal(ps.per_head[:, j], ps.per_head[:, 0])
    np.testing.assert_allclose(ps.averaged, ps.per_head[:, 0], rtol=0, atol=1e-15)


def test_random_models_average_on_simplex():
    rng = np.random.default_rng(0)
    losses = ["softmax", "relaxed_softmax", "evidential", "ldmi", "mse", "mae"]
    for seed in range(100):
        m = [losses[k] for k in rng.choice(6, size=rng.integers(1, 5))]
        model = build("small-mlp", "last_block", 4, m, seed=seed, input_shape=(5,))
        ps = model.predict(rng.normal(size=(3, 5)) * 3)
        assert np.all(ps.per_head >= 0)
        np.testing.assert_allclose(ps.per_head.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(ps.averaged.sum(-1), 1.0, atol=1e-9)


def test_head_independence_and_trunk_sharing():
    model = build("small-mlp", "last_block", 3, ["softmax", "mse", "evidential"], seed=3, input_shape=(5,))
    before = model.predict(X).per_head
    model.heads[1].parameters()[0].data[...] += 0.5
    after = model.predict(X).per_head
    np.testing.assert_array_equal(after[:, 0], before[:, 0])
    np.testing.assert_array_equal(after[:, 2], before[:, 2])
    assert not np.array_equal(after[:, 1], before[:, 1])
    model.trunk.parameters()[0].data[...] += 0.5
    moved = model.predict(X).per_head
    assert all(not np.array_equal(moved[:, j], after[:, j]) for j in range(3))


def test_no_parameter_sharing():
    model = build("small-mlp", "last_block", 3, ["softmax"] * 3, seed=0, input_shape=(5,))
    ids = [id(p.data) for p in model.parameters()]
    assert len(ids) == len(set(ids))


def test_invalid_build():
    with pytest.raises(ValueError):
        MultiHeadModel("small-mlp", (5,), 3, [], "last_block")
    with pytest.raises(ValueError):
        MultiHeadModel("small-mlp", (5,), 3, ["softmax"], 42)


def test_checkpoint_round_trip(tmp_path):
    model = build("small-mlp", 4, 3, ["relaxed_softmax", "evidential"], seed=5, input_shape=(5,))
    model.save(tmp_path / "m.selb")
    back = MultiHeadModel.load(tmp_path / "m.selb")
    assert back.config() == model.config()
    np.testing.assert_array_equal(back.predict(X).per_head, model.predict(X).per_head)
