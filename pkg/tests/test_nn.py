import numpy as np
import pytest

from multiloss.autodiff import ShapeError, Tensor
from multiloss.nn import (
    Dense, Dropout, LayerStack, Mode, ParamFormatError, ReLU, load_params, reference_architecture, save_params,
)


def _stack(seed):
    s = LayerStack(reference_architecture("small-mlp", (5,), 3).layers)
    s.init_params(seed)
    return s


def test_same_seed_bit_identical():
    a, b = _stack(7).state_dict(), _stack(7).state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_different_seeds_differ():
    a, b = _stack(1).state_dict(), _stack(2).state_dict()
    assert any(not np.array_equal(a[k], b[k]) for k in a if k.endswith("W"))


def test_he_uniform_bound_and_zero_bias():
    layer = LayerStack([Dense(4, 4)])
    for seed in range(20):
        layer.init_params(seed)
        w = layer.layers[0].params["W"].data
        assert np.all(np.abs(w) <= np.sqrt(6 / 4))
        assert np.all(layer.layers[0].params["b"].data == 0)


def test_dropout_zero_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    for mode in Mode:
        out = Dropout(0.0).forward(x, mode, np.random.default_rng(1))
        np.testing.assert_array_equal(out.data, x.data)


def test_eval_mode_ignores_rng():
    s = LayerStack([Dense(3, 64), ReLU(), Dropout(0.5), Dense(64, 2)])
    s.init_params(0)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    a = s.forward(x, Mode.EVAL, np.random.default_rng(1)).data
    b = s.forward(x, Mode.EVAL, np.random.default_rng(2)).data
    np.testing.assert_array_equal(a, b)


def test_mc_dropout_samples_differ():
    s = LayerStack([Dense(3, 64), ReLU(), Dropout(0.5), Dense(64, 2)])
    s.init_params(0)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    a = s.forward(x, Mode.MC_DROPOUT, np.random.default_rng(1)).data
    b = s.forward(x, Mode.MC_DROPOUT, np.random.default_rng(2)).data
    assert not np.array_equal(a, b)


def test_inverted_dropout_expectation():
    s = LayerStack([Dropout(0.5), Dense(8, 3)])
    s.init_params(3)
    x = Tensor(np.abs(np.random.default_rng(0).normal(size=(1, 8))) + 0.5)
    ref = s.forward(x, Mode.EVAL).data
    rng = np.random.default_rng(0)
    xs = Tensor(np.repeat(x.data, 10_000, axis=0))
    mean = s.forward(xs, Mode.TRAIN, rng).data.mean(axis=0)
    np.testing.assert_allclose(mean, ref[0], rtol=0.02, atol=0.02 * np.abs(ref).max())


def test_dropout_p_range():
    with pytest.raises(ValueError):
        Dropout(1.0)
    with pytest.raises(ValueError):
        Dropout(-0.1)


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        Dense(3, 2).forward(Tensor(np.ones((2, 4))), Mode.EVAL, None)


def test_reference_architectures():
    mlp = reference_architecture("small-mlp", (10,), 3)
    assert [l.kind for l in mlp.layers] == [
        "flatten", "dense", "relu", "dropout", "dense", "relu", "dropout", "dense"]
    cnn = reference_architecture("small-cnn", (1, 8, 8), 4)
    stack = LayerStack(cnn.layers)
    stack.init_params(0)
    assert stack.forward(Tensor(np.zeros((2, 1, 8, 8)))).shape == (2, 4)
    assert cnn.resolve_split("last_block") == 8
    assert cnn.resolve_split("3") == 3
    with pytest.raises(ValueError):
        cnn.resolve_split(99)
    with pytest.raises(ValueError):
        cnn.resolve_split("middle")
    with pytest.raises(ValueError):
        reference_architecture("vgg16", (3, 32, 32), 10)


def test_param_file_round_trip(tmp_path):
    state = _stack(4).state_dict()
    save_params(tmp_path / "p.selb", state)
    raw = (tmp_path / "p.selb").read_bytes()
    assert raw[:4] == b"SELB"
    back = load_params(tmp_path / "p.selb")
    assert list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == state[k].tobytes()


def test_param_file_errors(tmp_path):
    bad = tmp_path / "bad.selb"
    bad.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ParamFormatError):
        load_params(bad)
    save_params(tmp_path / "p.selb", _stack(0).state_dict())
    (tmp_path / "t.selb").write_bytes((tmp_path / "p.selb").read_bytes()[:-5])
    with pytest.raises(ParamFormatError):
        load_params(tmp_path / "t.selb")
