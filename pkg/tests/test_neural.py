import numpy as np
import pytest

from cellcast.neural import (
    DenseLayer,
    OptimizerState,
    TrainingDivergence,
    backward,
    forward,
    glorot_uniform,
    mse,
    relu,
    sgd_adam_step,
)


def random_stack(rng, sizes, relu_last=False):
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        is_last = i == len(sizes) - 2
        layers.append(DenseLayer(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out), relu=relu_last or not is_last))
    return layers


def naive_forward(layers, x):
    h = [float(v) for v in x]
    for layer in layers:
        out = []
        for o in range(layer.fan_out):
            acc = 0.0
            for i in range(layer.fan_in):
                acc += layer.weights[o, i] * h[i]
            acc += layer.bias[o]
            out.append(max(acc, 0.0) if layer.relu else acc)
        h = out
    return np.array(h)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


def test_identity_forward():
    x = np.array([1.5, -2.0, 3.0])
    y, _ = forward([DenseLayer(np.eye(3), np.zeros(3))], x)
    assert np.array_equal(y, x)


def test_relu_definition():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


def test_forward_matches_triple_loop():
    rng = np.random.default_rng(0)
    layers = random_stack(rng, [5, 7, 3])
    x = rng.normal(size=5)
    y, _ = forward(layers, x)
    np.testing.assert_allclose(y, naive_forward(layers, x), rtol=0, atol=1e-12)


def test_forward_batch_and_vector_agree():
    rng = np.random.default_rng(1)
    layers = random_stack(rng, [4, 6, 2])
    X = rng.normal(size=(5, 4))
    batch, _ = forward(layers, X)
    for i in range(5):
        np.testing.assert_allclose(forward(layers, X[i])[0], batch[i], rtol=0, atol=1e-13)


def test_dimension_mismatch():
    layers = random_stack(np.random.default_rng(0), [3, 2])
    with pytest.raises(ValueError, match="expects 3"):
        forward(layers, np.ones(4))
    _, tape = forward(layers, np.ones(3))
    with pytest.raises(ValueError):
        backward(layers, tape, np.ones(5))
    with pytest.raises(ValueError):
        backward(layers + layers, tape, np.ones(2))


def test_single_affine_sum_gradient():
    rng = np.random.default_rng(2)
    layer = DenseLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    x = rng.normal(size=4)
    _, tape = forward([layer], x)
    [(dw, db)], dx = backward([layer], tape, np.ones(3))
    assert np.array_equal(dw, np.outer(np.ones(3), x))
    assert np.array_equal(db, np.ones(3))
    np.testing.assert_allclose(dx, layer.weights.sum(axis=0))


def test_relu_blocks_negative_units():
    layer = DenseLayer(np.array([[1.0], [1.0]]), np.array([-5.0, 0.0]), relu=True)
    _, tape = forward([layer], np.array([2.0]))
    [(dw, db)], _ = backward([layer], tape, np.ones(2))
    assert dw[0, 0] == 0.0 and db[0] == 0.0
    assert db[1] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_gradient_check(seed):
    rng = np.random.default_rng(seed)
    layers = random_stack(rng, [4, 6, 5, 3])
    X = rng.normal(size=(3, 4))
    T = rng.normal(size=(3, 3))
    _, tape = forward(layers, X)
    assert min(np.abs(z).min() for z in tape.pre_activations) > 1e-3
    y, tape = forward(layers, X)
    _, g = mse(y, T)
    grads, dx = backward(layers, tape, g)

    def loss():
        return mse(forward(layers, X)[0], T)[0]

    h = 1e-5
    worst = 0.0
    for layer, (dw, db) in zip(layers, grads):
        for param, analytic in ((layer.weights, dw), (layer.bias, db)):
            flat, aflat = param.reshape(-1), analytic.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss()
                flat[i] = old - h
                down = loss()
                flat[i] = old
                worst = max(worst, rel_err(aflat[i], (up - down) / (2 * h)))
    assert worst < 1e-4


def test_mse_and_gradient():
    loss, g = mse(np.array([1.0, 3.0]), np.array([0.0, 1.0]))
    assert loss == 2.5
    assert g.tolist() == [1.0, 2.0]


def test_glorot_bounds():
    layer = DenseLayer(np.zeros((30, 20)), np.ones(30))
    glorot_uniform(layer, np.random.default_rng(0))
    limit = np.sqrt(6 / 50)
    assert np.abs(layer.weights).max() <= limit and np.all(layer.bias == 0)


def test_adam_zero_gradient_is_fixed_point():
    p = np.array([1.0, -2.0])
    state = OptimizerState(2)
    sgd_adam_step(state, p, np.zeros(2))
    assert p.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adam_moves_against_constant_gradient():
    p = np.array([0.0, 0.0])
    state = OptimizerState(2)
    for _ in range(50):
        sgd_adam_step(state, p, np.array([3.0, -0.5]))
    assert p[0] < 0 < p[1]
    assert state.step == 50


def test_adam_two_steps_by_hand():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = np.array([1.0])
    state = OptimizerState(1, lr, b1, b2, eps)
    g1, g2 = 2.0, -1.0
    sgd_adam_step(state, p, np.array([g1]))
    # step 1: m = 0.2, v = 0.004, m_hat = 2, v_hat = 4
    expected = 1.0 - lr * 2.0 / (2.0 + eps)
    assert p[0] == pytest.approx(expected, abs=1e-15)
    sgd_adam_step(state, p, np.array([g2]))
    m = b1 * (1 - b1) * g1 + (1 - b1) * g2
    v = b2 * (1 - b2) * g1 ** 2 + (1 - b2) * g2 ** 2
    m_hat, v_hat = m / (1 - b1 ** 2), v / (1 - b2 ** 2)
    expected -= lr * m_hat / (np.sqrt(v_hat) + eps)
    assert p[0] == pytest.approx(expected, abs=1e-15)


def test_adam_rejects_non_finite():
    state = OptimizerState(2)
    with pytest.raises(TrainingDivergence, match="non-finite"):
        sgd_adam_step(state, np.zeros(2), np.array([np.nan, 1.0]))
    assert state.step == 0
    with pytest.raises(ValueError):
        sgd_adam_step(state, np.zeros(3), np.zeros(3))


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    layers = random_stack(rng, [6, 8, 2])
    x = rng.normal(size=(4, 6))
    assert forward(layers, x)[0].tobytes() == forward(layers, x)[0].tobytes()


def test_linear_task_loss_drops_below_one_percent():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(2, 5))
    X = rng.normal(size=(64, 5))
    T = X @ A.T
    params = np.zeros(12)
    layers = [DenseLayer(params[:10].reshape(2, 5), params[10:])]
    state = OptimizerState(12, lr=0.05)
    initial = mse(forward(layers, X)[0], T)[0]
    for _ in range(500):
        y, tape = forward(layers, X)
        _, g = mse(y, T)
        [(dw, db)], _ = backward(layers, tape, g)
        sgd_adam_step(state, params, np.concatenate([dw.ravel(), db]))
    assert mse(forward(layers, X)[0], T)[0] < 0.01 * initial
