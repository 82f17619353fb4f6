import numpy as np
import pytest

from multiloss import autodiff as ad
from multiloss.data import gen_gaussian_blobs
from multiloss.losses import BatchLabels, loss_value
from multiloss.metrics import class_variance
from multiloss.model import ModelSpec, build
from multiloss.nn import LayerStack, Mode, reference_architecture
from multiloss.rng import substream
from multiloss.strategies import (
    TrainConfig, mc_dropout_predict, swa_average, train_deep_ensembles, train_dse, train_multiloss,
    train_single_network, train_strategy,
)

from conftest import check_grad


def _acc(ps, labels):
    return float((ps.averaged.argmax(-1) == labels).mean())


def _plain_state(seed, train, epochs, loss="softmax"):
    stack = LayerStack(reference_architecture("small-mlp", train.feature_shape, 3).layers)
    stack.init_params(seed)
    cfg = TrainConfig(epochs=epochs, seed=seed, M=1, select_best=False)
    return train_single_network(stack, loss, 3, train, cfg).state_dict()


def _unprefixed(state):
    return {k.split("/", 1)[1]: v for k, v in state.items()}


def _assert_bitwise(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(M=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    assert TrainConfig().learning_rate == 1e-3 and TrainConfig().dropout_p == 0.5


def test_multiloss_m1_matches_plain_training(blobs):
    train, test = blobs
    cfg = TrainConfig(epochs=3, seed=4, M=1, select_best=False)
    model = build("small-mlp", "last_block", 3, ["softmax"], 4, train.feature_shape)
    train_multiloss(model, train, test, cfg)
    _assert_bitwise(_unprefixed(model.state_dict()), _plain_state(4, train, 3))


def test_trunk_gradient_is_sum_of_head_gradients(blobs):
    train, _ = blobs
    model = build("small-mlp", "last_block", 3, ["softmax", "evidential", "mse"], 0, train.feature_shape)
    xb, yb = train.x[:16], train.labels[:16]
    labels = BatchLabels(yb, 3)
    w = model.trunk.parameters()[0]

    def head_loss(j):
        feats = model.features(xb)
        return loss_value(model.losses[j], model.heads[j].forward(feats, Mode.EVAL), labels, 2)

    total = head_loss(0) + head_loss(1) + head_loss(2)
    total.backward()
    joint = w.grad.copy()
    parts = np.zeros_like(joint)
    for j in range(3):
        w.grad = None
        head_loss(j).backward()
        parts += w.grad
    np.testing.assert_allclose(joint, parts, rtol=1e-12, atol=1e-15)

    # finite-difference check on one trunk weight
    i = (2, 5)
    h = 1e-5
    orig = w.data[i]
    vals = []
    with ad.no_grad():
        for sign in (1, -1):
            w.data[i] = orig + sign * h
            vals.append(sum(head_loss(j).item() for j in range(3)))
    w.data[i] = orig
    fd = (vals[0] - vals[1]) / (2 * h)
    assert abs(fd - joint[i]) <= 1e-6 * max(1.0, abs(fd))


def test_multiloss_blobs_accuracy():
    train, test = gen_gaussian_blobs(num_classes=3, n_per_class=200, spread=0.5, label_noise_frac=0.1, seed=0)
    model = build("small-mlp", "last_block", 3, ["softmax", "evidential", "mse"], 0, train.feature_shape)
    pred = train_multiloss(model, train, test, TrainConfig(epochs=30, seed=0, M=3))
    assert _acc(pred.predict(test.x), test.labels) >= 0.95


def test_multiloss_log_records(blobs):
    train, test = blobs
    model = build("small-mlp", "last_block", 3, ["softmax", "mse"], 0, train.feature_shape)
    pred = train_multiloss(model, train, test, TrainConfig(epochs=2, seed=0, M=2))
    assert len(pred.log) == 4
    assert set(pred.log[0]) >= {"epoch", "head", "loss", "train_acc", "test_acc"}
    assert [(r["epoch"], r["head"]) for r in pred.log] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_multiloss_epoch_loss_mostly_non_increasing(blobs):
    train, test = blobs
    model = build("small-mlp", "last_block", 3, ["softmax", "mse", "mae"], 1, train.feature_shape)
    pred = train_multiloss(model, train, test, TrainConfig(epochs=30, seed=1, M=3, select_best=False))
    totals = np.array([sum(r["loss"] for r in pred.log if r["epoch"] == e) for e in range(30)])
    # every 10-epoch window ends no higher than it starts, allowing one noisy window
    rises = [e for e in range(30 - 9) if totals[e + 9] > totals[e]]
    assert len(rises) <= 1, totals
    # before the plateau the descent is strictly epoch by epoch
    assert np.all(np.diff(totals[:8]) < 0), totals


def test_dse_freeze_contract(blobs):
    train, test = blobs
    cfg = TrainConfig(epochs=5, seed=2, M=3, dse_head_epochs=3)
    init = build("small-mlp", "last_block", 3, ["softmax"] * 3, 2, train.feature_shape)
    full = build("small-mlp", "last_block", 3, ["softmax"] * 3, 2, train.feature_shape)
    train_dse(full, train, test, cfg)
    phase0 = build("small-mlp", "last_block", 3, ["softmax"], 2, train.feature_shape)
    train_dse(phase0, train, test, TrainConfig(epochs=5, seed=2, M=1))
    _assert_bitwise(full.trunk.state_dict(), phase0.trunk.state_dict())
    assert any(not np.array_equal(a, b) for a, b in zip(full.trunk.state_dict().values(),
                                                         init.trunk.state_dict().values()))
    phases = {r["phase"] for r in train_dse(build("small-mlp", "last_block", 3, ["softmax"] * 2, 2,
                                                   train.feature_shape), train, test, cfg).log}
    assert phases == {0, 1}


def test_dse_m1_equals_multiloss(blobs):
    train, test = blobs
    cfg = TrainConfig(epochs=3, seed=5, M=1)
    a = build("small-mlp", "last_block", 3, ["softmax"], 5, train.feature_shape)
    b = build("small-mlp", "last_block", 3, ["softmax"], 5, train.feature_shape)
    train_dse(a, train, test, cfg)
    train_multiloss(b, train, test, cfg)
    _assert_bitwise(a.state_dict(), b.state_dict())


def test_dse_rejects_mixed_losses(blobs):
    train, test = blobs
    model = build("small-mlp", "last_block", 3, ["softmax", "mse"], 0, train.feature_shape)
    with pytest.raises(ValueError):
        train_dse(model, train, test, TrainConfig(epochs=1, M=2))


def test_dse_later_heads_close_to_first():
    train, test = gen_gaussian_blobs(num_classes=3, n_per_class=200, spread=0.5, label_noise_frac=0.1, seed=3)
    model = build("small-mlp", "last_block", 3, ["softmax"] * 3, 3, train.feature_shape)
    pred = train_dse(model, train, test, TrainConfig(epochs=20, seed=3, M=3, dse_head_epochs=10))
    per_head = pred.predict(test.x).per_head
    accs = [(per_head[:, j].argmax(-1) == test.labels).mean() for j in range(3)]
    assert all(a >= accs[0] - 0.05 for a in accs[1:])


def test_deep_ensembles():
    train, test = gen_gaussian_blobs(num_classes=3, n_per_class=100, spread=0.5, label_noise_frac=0.1, seed=0)
    spec = ModelSpec("small-mlp", train.feature_shape, 3, ["softmax"])
    single = train_deep_ensembles(spec, train, test, TrainConfig(epochs=3, M=1))
    assert len(single.models) == 1 and single.predict(test.x).num_heads == 1
    for seed in range(5):
        pred = train_deep_ensembles(spec, train, test, TrainConfig(epochs=10, seed=seed, M=3))
        ps = pred.predict(test.x)
        member = [(ps.per_head[:, j].argmax(-1) == test.labels).mean() for j in range(3)]
        assert _acc(ps, test.labels) >= min(member)
        if seed == 0:
            assert (ps.per_head[:, 0].argmax(-1) != ps.per_head[:, 1].argmax(-1)).any()


def test_mc_dropout_contract(blobs):
    train, test = blobs
    spec = ModelSpec("small-mlp", train.feature_shape, 3, ["softmax"], dropout_p=0.5)
    pred = train_strategy("mc_dropout", spec, train, test, TrainConfig(epochs=5, M=8))
    model = pred.models[0]
    a = mc_dropout_predict(model, test.x, 8, substream(0, "inference"))
    b = mc_dropout_predict(model, test.x, 8, substream(0, "inference"))
    np.testing.assert_array_equal(a.per_head, b.per_head)
    assert a.num_heads == 8
    assert np.all(class_variance(a.per_head) >= 0) and class_variance(a.per_head).mean() > 0

    model0 = build("small-mlp", "last_block", 3, ["softmax"], 0, train.feature_shape, dropout_p=0.0)
    c = mc_dropout_predict(model0, test.x, 8, substream(0, "inference"))
    for j in range(8):
        np.testing.assert_array_equal(c.per_head[:, j], c.per_head[:, 0])
    assert np.all(class_variance(c.per_head) == 0.0)


def test_mc_dropout_needs_dropout_layer(blobs):
    train, _ = blobs
    model = build("small-mlp", "last_block", 3, ["softmax"], 0, train.feature_shape, dropout_p=0.5)
    model.trunk.layers = [l for l in model.trunk.layers if l.kind != "dropout"]
    model.heads[0].layers = [l for l in model.heads[0].layers if l.kind != "dropout"]
    with pytest.raises(ValueError):
        mc_dropout_predict(model, train.x[:4], 4, np.random.default_rng(0))


def test_swa_average_examples():
    w = {"a": np.array([1.5, -2.0]), "b": np.array([[0.1]])}
    back = swa_average([w, w, w, w])
    for k in w:
        assert back[k].tobytes() == w[k].tobytes()
    zero = swa_average([w, {k: -v for k, v in w.items()}])
    for k in w:
        assert np.all(zero[k] == 0.0)
    with pytest.raises(ValueError):
        swa_average([])
    with pytest.raises(ValueError):
        swa_average([w, {"a": np.zeros(3), "b": np.zeros((1, 1))}])


def test_swa_close_to_last_snapshot():
    train, test = gen_gaussian_blobs(num_classes=3, n_per_class=200, spread=0.5, label_noise_frac=0.1, seed=1)
    spec = ModelSpec("small-mlp", train.feature_shape, 3, ["softmax"])
    pred = train_strategy("swa", spec, train, test, TrainConfig(epochs=30, seed=1, M=4, swa_snapshot_epochs=4))
    assert len(pred.snapshots) == 4 and pred.single_model
    swa_acc = _acc(pred.predict(test.x), test.labels)
    last = spec.build(0)
    last.load_state_dict(pred.snapshots[-1])
    assert swa_acc >= _acc(last.predict(test.x), test.labels) - 0.02


@pytest.mark.parametrize("strategy, rows", [("ours", 2), ("dse", 2), ("de", 2), ("mc_dropout", 2), ("swa", 1)])
def test_row_count_per_strategy(blobs, strategy, rows):
    train, test = blobs
    losses = ["softmax", "mse"] if strategy == "ours" else ["softmax"] * (2 if strategy == "dse" else 1)
    spec = ModelSpec("small-mlp", train.feature_shape, 3, losses, dropout_p=0.5 if strategy == "mc_dropout" else 0)
    pred = train_strategy(strategy, spec, train, test, TrainConfig(epochs=2, M=2, swa_snapshot_epochs=2,
                                                                   dse_head_epochs=1))
    assert pred.predict(test.x).per_head.shape == (len(test), rows, 3)


def test_strategies_share_data_order(blobs):
    # every strategy draws the epoch order from the same (seed, shuffle, epoch) stream
    train, test = blobs
    spec = ModelSpec("small-mlp", train.feature_shape, 3, ["softmax"])
    states = []
    for strategy in ("ours", "de", "swa"):
        states.append(train_strategy(strategy, spec, train, test,
                                     TrainConfig(epochs=2, seed=9, M=1, select_best=False, swa_snapshot_epochs=1)
                                     ).models[0].state_dict())
    _assert_bitwise(states[0], states[1])
    _assert_bitwise(states[0], states[2])


def test_loss_gradients_flow_through_model(blobs):
    train, _ = blobs
    model = build("small-mlp", "last_block", 3, ["relaxed_softmax"], 0, train.feature_shape)
    xb = train.x[:6]
    labels = BatchLabels(train.labels[:6], 3)
    stack = model.heads[0]
    feats = model.features(xb).data
    err = check_grad(lambda f: loss_value("relaxed_softmax", stack.forward(f), labels), feats)
    assert err < 1e-4
