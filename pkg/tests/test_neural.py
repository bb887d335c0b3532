import math

import numpy as np
import pytest
from oracles import network_grad_errors, numeric_grad, random_net, rel_err

from lambtouch import neural
from lambtouch.neural import Head, LossKind, NetSpec, TrainConfig


def check_network_gradients(model, X, Y, seed):
    return max(network_grad_errors(model, X, Y, seed))


def test_gradients_composed_network_100_trials():
    rng = np.random.default_rng(12345)
    worst = 0.0
    for trial in range(100):
        head = Head.SOFTMAX_CLASSIFIER if trial % 2 == 0 else Head.LINEAR_REGRESSOR
        model = random_net(rng, head)
        X = rng.normal(size=(6, 10))
        Y = rng.integers(0, 4, 6) if head is Head.SOFTMAX_CLASSIFIER else rng.normal(size=(6, 4))
        worst = max(worst, check_network_gradients(model, X, Y, trial))
    assert worst < 1e-4


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_gradients_deep_network(dropout):
    rng = np.random.default_rng(7)
    model = random_net(rng, Head.SOFTMAX_CLASSIFIER, hidden=(9, 7, 5), dropout=dropout)
    X = rng.normal(size=(8, 10))
    assert check_network_gradients(model, X, rng.integers(0, 4, 8), 3) < 1e-4


@pytest.mark.parametrize("kind", [LossKind.CROSS_ENTROPY, LossKind.MSE])
def test_loss_gradients(kind):
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = rng.normal(size=(5, 4)) * 3
        y = np.eye(4)[rng.integers(0, 4, 5)] if kind is LossKind.CROSS_ENTROPY else rng.normal(size=(5, 4))
        _, g = neural.loss_and_grad(z, y, kind)
        assert rel_err(g, numeric_grad(lambda: neural.loss(z, y, kind), z)) < 1e-6


def test_cross_entropy_values():
    z = np.array([[2.0, 1.0, 0.1]])
    expected = -math.log(math.exp(2.0) / (math.exp(2.0) + math.exp(1.0) + math.exp(0.1)))
    assert neural.loss(z, np.array([0]), LossKind.CROSS_ENTROPY) == pytest.approx(expected)
    assert neural.loss(z, np.array([[1.0, 0, 0]]), LossKind.CROSS_ENTROPY) == pytest.approx(expected)
    # stable for huge logits
    big = np.array([[1000.0, 0.0]])
    assert neural.loss(big, np.array([1]), LossKind.CROSS_ENTROPY) == pytest.approx(1000.0)
    with pytest.raises(ValueError):
        neural.loss(np.array([[math.nan, 0.0]]), np.array([0]), LossKind.CROSS_ENTROPY)


def test_mse_value():
    assert neural.loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]), LossKind.MSE) == pytest.approx(2.5)
    assert neural.loss(np.array([1.0, 2.0]), np.array([4.0, 6.0]), LossKind.MSE) == pytest.approx(12.5)


def test_cross_entropy_limits():
    assert neural.loss(np.zeros((1, 13)), np.array([4]), LossKind.CROSS_ENTROPY) == pytest.approx(math.log(13))
    z = np.zeros((1, 13))
    z[0, 2] = 20.0
    assert neural.loss(z, np.array([2]), LossKind.CROSS_ENTROPY) < 1e-6


def test_zero_upstream_gradient():
    rng = np.random.default_rng(8)
    model = random_net(rng, Head.SOFTMAX_CLASSIFIER)
    logits, cache = neural.forward_logits(model, rng.normal(size=(5, 10)), "train", rng)
    assert all(not np.any(g) for g in neural.backward(model, cache, np.zeros_like(logits)))


def test_duplicated_batch_gives_same_gradient():
    rng = np.random.default_rng(9)
    model = random_net(rng, Head.LINEAR_REGRESSOR, dropout=0.0)
    X, Y = rng.normal(size=(5, 10)), rng.normal(size=(5, 4))

    def grads(x, y):
        logits, cache = neural.forward_logits(model, x, "train")
        return neural.backward(model, cache, neural.loss_and_grad(logits, y, LossKind.MSE)[1])

    for a, b in zip(grads(X, Y), grads(np.vstack([X, X]), np.vstack([Y, Y]))):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_identity_stage():
    spec = NetSpec(3, (3,), 3, Head.LINEAR_REGRESSOR)
    model = neural.init_model(spec, np.random.default_rng(0))
    model.stages[0].weight = np.eye(3)
    model.head_weight = np.eye(3)
    x = np.array([0.5, 2.0, 7.0])
    np.testing.assert_allclose(neural.predict(model, x), x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_train_and_infer_agree_without_dropout():
    rng = np.random.default_rng(10)
    model = random_net(rng, Head.LINEAR_REGRESSOR, dropout=0.0)
    X = rng.normal(1.0, 2.0, size=(50, 10))
    # freeze the running stats at the full-batch statistics
    h = X
    for st in model.stages:
        st.bn_running_mean = h.mean(axis=0)
        st.bn_running_var = h.var(axis=0)
        h = np.maximum(neural.batchnorm_infer(st, h) @ st.weight.T + st.bias, 0)
    train_out, _ = neural.forward_logits(model, X, "train")
    np.testing.assert_allclose(train_out, neural.predict(model, X), atol=1e-5)


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(0).normal(size=(50, 13)) * 20
    p = neural.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


def test_adam_step_known_values():
    # first bias-corrected step moves each weight by lr * sign(g)
    cfg = TrainConfig(learning_rate=0.01)
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -4.0, 1e-3])]
    state = neural.AdamState.zeros_like(p)
    neural.adam_step(p, g, state, 1, cfg)
    np.testing.assert_allclose(p[0], [0.99, -1.99, 2.99], atol=1e-7)
    # second step with the same gradient again moves by lr
    neural.adam_step(p, g, state, 2, cfg)
    np.testing.assert_allclose(p[0], [0.98, -1.98, 2.98], atol=1e-7)
    with pytest.raises(ValueError):
        neural.adam_step(p, g, state, 0, cfg)


def test_adam_scalar_examples():
    cfg = TrainConfig()
    p = [np.array([0.0, 0.0, 5.0])]
    state = neural.AdamState.zeros_like(p)
    neural.adam_step(p, [np.array([1.0, 1.0, 0.0])], state, 1, cfg)
    assert p[0][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert p[0][0] == p[0][1]
    assert p[0][2] == 5.0


def test_adam_matches_reference_sequence():
    cfg = TrainConfig(learning_rate=0.1)
    rng = np.random.default_rng(4)
    grads = rng.normal(size=(5, 3))
    p = [np.zeros(3)]
    state = neural.AdamState.zeros_like(p)
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(grads, 1):
        neural.adam_step(p, [g], state, t, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p[0], ref, rtol=1e-12)


def test_dropout_preserves_expectation():
    spec = NetSpec(20, (200,), 1, Head.LINEAR_REGRESSOR, 0.3)
    model = neural.init_model(spec, np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(64, 20))
    rng = np.random.default_rng(2)
    _, cache = neural.forward_logits(model, X, "train", rng)
    masks = np.stack([neural.forward_logits(model, X, "train", rng)[1].stage_caches[0][6] for _ in range(200)])
    assert set(np.unique(masks)) <= {0.0, 1 / 0.7}
    assert abs(masks.mean() - 1.0) < 0.01
    assert abs((masks == 0).mean() - 0.3) < 0.01


def test_dropout_average_approaches_clean_output():
    spec = NetSpec(6, (5,), 2, Head.LINEAR_REGRESSOR, 0.3)
    rng = np.random.default_rng(11)
    model = neural.init_model(spec, rng)
    model.stages[0].bias = np.full(5, 0.5)
    X = rng.normal(size=(4, 6))
    no_drop = neural.ModelCheckpoint(
        NetSpec(6, (5,), 2, Head.LINEAR_REGRESSOR, 0.0), model.stages, model.head_weight, model.head_bias
    )
    clean, _ = neural.forward_logits(no_drop, X, "train")
    draws = np.mean([neural.forward_logits(model, X, "train", rng)[0] for _ in range(20_000)], axis=0)
    assert np.max(np.abs(draws - clean)) <= 0.02 * np.max(np.abs(clean))


def test_batchnorm_infer_is_affine():
    rng = np.random.default_rng(3)
    model = random_net(rng, Head.LINEAR_REGRESSOR)
    st = model.stages[0]
    st.bn_running_mean = rng.normal(size=10)
    st.bn_running_var = rng.uniform(0.5, 2.0, 10)
    a, b = rng.normal(size=10), rng.normal(size=10)
    f = lambda h: neural.batchnorm_infer(st, h)
    np.testing.assert_allclose(f(0.3 * a + 0.7 * b), 0.3 * f(a) + 0.7 * f(b), atol=1e-12)


def test_infer_single_matches_batch():
    rng = np.random.default_rng(5)
    model = random_net(rng, Head.SOFTMAX_CLASSIFIER)
    X = rng.normal(size=(7, 10))
    batch = neural.predict(model, X)
    for i in range(7):
        np.testing.assert_allclose(neural.predict(model, X[i]), batch[i], atol=1e-12)


def test_train_mode_requires_batch():
    model = random_net(np.random.default_rng(0), Head.LINEAR_REGRESSOR)
    with pytest.raises(ValueError):
        neural.forward_logits(model, np.zeros((1, 10)), "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        neural.predict(model, np.zeros(9))


def test_backward_rejects_foreign_cache():
    rng = np.random.default_rng(0)
    a = random_net(rng, Head.LINEAR_REGRESSOR)
    b = random_net(rng, Head.LINEAR_REGRESSOR)
    logits, cache = neural.forward_logits(a, rng.normal(size=(4, 10)), "train", rng)
    with pytest.raises(ValueError):
        neural.backward(b, cache, np.zeros_like(logits))


def test_running_stats_update():
    rng = np.random.default_rng(0)
    model = random_net(rng, Head.LINEAR_REGRESSOR, dropout=0.0)
    X = rng.normal(2.0, 3.0, size=(32, 10))
    _, cache = neural.forward_logits(model, X, "train")
    neural.update_running_stats(model, cache, 0.1)
    st = model.stages[0]
    np.testing.assert_allclose(st.bn_running_mean, 0.1 * X.mean(axis=0))
    np.testing.assert_allclose(st.bn_running_var, 0.9 + 0.1 * X.var(axis=0, ddof=1))


def test_parameter_counts():
    keypad = NetSpec(392, (100, 50), 13, Head.SOFTMAX_CLASSIFIER)
    m = neural.init_model(keypad, np.random.default_rng(0))
    linear = 392 * 100 + 100 + 100 * 50 + 50 + 50 * 13 + 13
    assert linear == 45_013
    # batchnorm sits in front of each hidden stage only; the head is a bare affine map
    assert sum(p.size for p in m.trainable()) == linear + 2 * (392 + 100) == 45_997
    assert m.n_floats() == linear + 4 * (392 + 100) == 46_981


def test_split_indices():
    s = neural.split_indices(6404, 0)
    assert [len(s[k]) for k in ("train", "val", "test")] == [4483, 1281, 640]
    allidx = np.concatenate([s["train"], s["val"], s["test"]])
    np.testing.assert_array_equal(np.sort(allidx), np.arange(6404))
    t = neural.split_indices(6404, 0)
    assert all(np.array_equal(s[k], t[k]) for k in s)
    assert not np.array_equal(s["train"], neural.split_indices(6404, 1)["train"])


def test_fit_learns_separable_toy_set():
    rng = np.random.default_rng(0)
    centers = rng.normal(0, 4, size=(3, 10))
    y = rng.integers(0, 3, 300)
    X = centers[y] + rng.normal(size=(300, 10))
    spec = NetSpec(10, (16,), 3, Head.SOFTMAX_CLASSIFIER)
    res = neural.train(spec, X, y, TrainConfig(max_epochs=60, patience=10, batch_size=32, learning_rate=1e-2))
    te = res.split["test"]
    acc = np.mean(np.argmax(neural.predict(res.model, X[te]), axis=1) == y[te])
    assert acc >= 0.95
    assert res.history[0]["val_loss"] > res.history[-1]["val_loss"] or res.model.train_meta["best_epoch"] > 1


def test_fit_regression_and_early_stopping():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 10))
    W = rng.normal(size=(10, 2))
    Y = X @ W
    spec = NetSpec(10, (32,), 2, Head.LINEAR_REGRESSOR, 0.0)
    cfg = TrainConfig(max_epochs=400, patience=5, learning_rate=1e-2, batch_size=16)
    res = neural.train(spec, X, Y, cfg)
    meta = res.model.train_meta
    assert meta["epochs"] == len(res.history)
    assert meta["epochs"] < 400 or meta["epochs"] - meta["best_epoch"] < 5
    assert meta["epochs"] - meta["best_epoch"] <= 5
    best = min(h["val_loss"] for h in res.history)
    assert meta["val_loss"] == best
    te = res.split["test"]
    var = np.mean((Y[te] - Y[te].mean(axis=0)) ** 2)
    assert np.mean((neural.predict(res.model, X[te]) - Y[te]) ** 2) < 0.2 * var


def test_fit_is_deterministic_and_float32_exact():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 10))
    y = (X[:, 0] > 0).astype(np.int64)
    spec = NetSpec(10, (8,), 2, Head.SOFTMAX_CLASSIFIER)
    cfg = TrainConfig(max_epochs=5, patience=5, batch_size=16, seed=9)
    a = neural.train(spec, X, y, cfg).model
    b = neural.train(spec, X, y, cfg).model
    for p, q in zip(a.trainable(), b.trainable()):
        assert p.tobytes() == q.tobytes()
        assert np.array_equal(p, p.astype(np.float32))
    assert a.train_meta == b.train_meta


def test_fit_detects_divergence():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 10))
    Y = rng.normal(size=(40, 2)) * 1e200  # squared error overflows
    spec = NetSpec(10, (8,), 2, Head.LINEAR_REGRESSOR, 0.0)
    with np.errstate(over="ignore"), pytest.raises(neural.TrainingDiverged):
        neural.train(spec, X, Y, TrainConfig(max_epochs=3))
