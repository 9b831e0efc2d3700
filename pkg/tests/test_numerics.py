import numpy as np
import pytest

from meshfield.numerics import (
    AdamState,
    adam_step,
    finite_diff_check,
    mlp_backward,
    mlp_forward,
    mlp_grad_input_backward,
    mlp_init,
    mlp_input_gradient,
    positional_encode,
)


# ---------------------------------------------------------------------------
# positional encoding

def test_positional_encode_zero_vector():
    out = positional_encode(np.zeros(3), 2)
    expect = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1], dtype=float)
    np.testing.assert_allclose(out, expect, atol=1e-15)


def test_positional_encode_quarter_period():
    out = positional_encode(np.array([0.5]), 1)
    np.testing.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-15)


def test_positional_encode_matches_scalar_trig_oracle():
    x = np.array([0.3, -0.7])
    n = 4
    out = positional_encode(x, n)
    assert out.shape == (2 * (1 + 2 * n),)
    # independent scalar recomputation
    expect = list(x)
    for j in range(n):
        for fn in (np.sin, np.cos):
            for xi in x:
                expect.append(fn((2.0**j) * np.pi * xi))
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_positional_encode_batch_rows_match_single():
    x = np.array([[0.1, 0.2], [0.3, -0.4]])
    out = positional_encode(x, 3)
    for i in range(2):
        np.testing.assert_array_equal(out[i], positional_encode(x[i], 3))


def test_positional_encode_injective_identity_part():
    # the raw input is embedded verbatim, so distinct inputs stay distinct
    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, size=3)
    b = rng.uniform(-1, 1, size=3)
    ea, eb = positional_encode(a, 2), positional_encode(b, 2)
    np.testing.assert_array_equal(ea[:3], a)
    assert not np.allclose(ea, eb)


# ---------------------------------------------------------------------------
# mlp forward

def test_mlp_identity_single_layer():
    net = mlp_init([2, 2], output_activation="linear")
    net.weights[0] = np.eye(2)
    net.biases[0] = np.zeros(2)
    y, _ = mlp_forward(net, np.array([1.0, 2.0]))
    np.testing.assert_allclose(y, [1.0, 2.0])


def test_mlp_zero_weights_returns_bias():
    net = mlp_init([3, 2], output_activation="linear")
    net.weights[0][:] = 0.0
    net.biases[0] = np.array([0.5, -1.5])
    for x in (np.zeros(3), np.ones(3), np.array([9.0, -3.0, 2.0])):
        y, _ = mlp_forward(net, x)
        np.testing.assert_allclose(y, [0.5, -1.5])


def test_mlp_forward_matches_straight_line_reevaluation():
    rng = np.random.default_rng(42)
    net = mlp_init([3, 4, 2], activation="softplus", rng=rng)
    x = np.array([0.1, 0.2, 0.3])
    y, _ = mlp_forward(net, x)
    # independent scalar re-evaluation of the same arithmetic
    z0 = np.array([
        sum(net.weights[0][i, j] * x[j] for j in range(3)) + net.biases[0][i]
        for i in range(4)
    ])
    a0 = np.log1p(np.exp(z0))
    z1 = np.array([
        sum(net.weights[1][i, j] * a0[j] for j in range(4)) + net.biases[1][i]
        for i in range(2)
    ])
    np.testing.assert_allclose(y, z1, rtol=1e-10)


def test_mlp_forward_dim_mismatch_is_error():
    net = mlp_init([3, 2])
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros(4))


def test_mlp_forward_no_nan_for_finite_inputs():
    rng = np.random.default_rng(3)
    net = mlp_init([4, 8, 8, 1], activation="softplus", rng=rng)
    x = rng.normal(scale=50.0, size=(16, 4))
    y, _ = mlp_forward(net, x)
    assert np.all(np.isfinite(y))


# ---------------------------------------------------------------------------
# mlp backward

def test_mlp_backward_linear_net_transpose_rule():
    rng = np.random.default_rng(5)
    net = mlp_init([3, 2], rng=rng, output_activation="linear")
    x = rng.normal(size=3)
    _, tape = mlp_forward(net, x)
    og = rng.normal(size=2)
    ig, _ = mlp_backward(net, tape, og)
    np.testing.assert_allclose(ig, net.weights[0].T @ og, rtol=1e-12)


def test_mlp_backward_zero_output_grad_gives_zero_grads():
    rng = np.random.default_rng(6)
    net = mlp_init([3, 5, 2], activation="relu", rng=rng)
    _, tape = mlp_forward(net, rng.normal(size=3))
    ig, pg = mlp_backward(net, tape, np.zeros(2))
    assert np.all(ig == 0)
    for dw, db in pg:
        assert np.all(dw == 0) and np.all(db == 0)


def _flatten_params(net):
    return np.concatenate([w.ravel() for w in net.weights]
                          + [b.ravel() for b in net.biases])


def _set_params(net, flat):
    ofs = 0
    for w in net.weights:
        w[...] = flat[ofs:ofs + w.size].reshape(w.shape)
        ofs += w.size
    for b in net.biases:
        b[...] = flat[ofs:ofs + b.size].reshape(b.shape)
        ofs += b.size


@pytest.mark.parametrize("act", ["softplus", "relu"])
def test_mlp_param_grads_match_finite_differences(act):
    rng = np.random.default_rng(11)
    net = mlp_init([3, 6, 4, 2], activation=act, rng=rng)
    x = rng.normal(size=3)
    direction = rng.normal(size=2)

    def f(flat):
        _set_params(net, flat)
        y, tape = mlp_forward(net, x)
        value = float(direction @ y)
        _, pg = mlp_backward(net, tape, direction)
        grad = np.concatenate([dw.ravel() for dw, _ in pg]
                              + [db.ravel() for _, db in pg])
        return value, grad

    err = finite_diff_check(f, _flatten_params(net), step=1e-5)
    assert err < 1e-4


def test_mlp_stale_tape_rejected():
    net = mlp_init([3, 2])
    other = mlp_init([4, 4, 2])
    _, tape = mlp_forward(net, np.zeros(3))
    with pytest.raises(ValueError):
        mlp_backward(other, tape, np.zeros(2))


def test_mlp_batch_consistent_with_single():
    rng = np.random.default_rng(12)
    net = mlp_init([3, 5, 1], activation="softplus", rng=rng)
    X = rng.normal(size=(4, 3))
    Y, tape = mlp_forward(net, X)
    for i in range(4):
        yi, _ = mlp_forward(net, X[i])
        np.testing.assert_allclose(Y[i], yi, rtol=1e-13)
    G = mlp_input_gradient(net, tape)
    for i in range(4):
        _, ti = mlp_forward(net, X[i])
        np.testing.assert_allclose(G[i], mlp_input_gradient(net, ti), rtol=1e-13)


# ---------------------------------------------------------------------------
# input gradient and its backward (double backprop)

def test_mlp_input_gradient_matches_fd():
    rng = np.random.default_rng(13)
    net = mlp_init([3, 8, 1], activation="softplus", rng=rng)
    x0 = rng.normal(size=3)

    def f(x):
        y, tape = mlp_forward(net, x)
        return float(y[0]), mlp_input_gradient(net, tape)

    assert finite_diff_check(f, x0, step=1e-6) < 1e-6


def test_mlp_grad_input_backward_matches_fd_wrt_params_and_input():
    rng = np.random.default_rng(14)
    net = mlp_init([3, 6, 5, 1], activation="softplus", rng=rng)
    x0 = rng.normal(size=3)
    p = rng.normal(size=3)
    n_param = _flatten_params(net).size

    def f(theta):
        _set_params(net, theta[:n_param])
        x = theta[n_param:]
        _, tape = mlp_forward(net, x)
        g = mlp_input_gradient(net, tape)
        value = float(p @ g)
        bar_u, pg = mlp_grad_input_backward(net, tape, p)
        grad = np.concatenate([dw.ravel() for dw, _ in pg]
                              + [db.ravel() for _, db in pg]
                              + [np.asarray(bar_u).ravel()])
        # param grads come back ordered per layer; flatten in the same way
        gw = np.concatenate([dw.ravel() for dw, _ in pg])
        gb = np.concatenate([db.ravel() for _, db in pg])
        grad = np.concatenate([gw, gb, np.asarray(bar_u).ravel()])
        return value, grad

    theta0 = np.concatenate([_flatten_params(net), x0])
    assert finite_diff_check(f, theta0, step=1e-5) < 1e-5


# ---------------------------------------------------------------------------
# adam

def test_adam_zero_grad_is_identity():
    p = np.array([1.0, -2.0, 3.5])
    before = p.copy()
    st = AdamState(lr=0.1)
    for _ in range(3):
        adam_step(st, p, np.zeros(3))
    np.testing.assert_array_equal(p, before)
    assert st.t == 3


def test_adam_first_step_hand_evaluated():
    # m1 = 0.1*g, v1 = 0.001*g^2; update = lr * g / (|g| + eps) for t=1
    p = np.array([1.0])
    st = AdamState(lr=0.1)
    adam_step(st, p, np.array([1.0]))
    expect = 1.0 - 0.1 * (0.1 / (1 - 0.9)) / (np.sqrt(0.001 / (1 - 0.999)) + 1e-8)
    np.testing.assert_allclose(p, [expect], rtol=1e-12)
    assert abs(p[0] - 0.9) < 1e-6


def test_adam_constant_grad_monotone():
    p = np.array([1.0])
    st = AdamState(lr=0.05)
    vals = [p[0]]
    for _ in range(5):
        adam_step(st, p, np.array([1.0]))
        vals.append(p[0])
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_adam_shape_mismatch_rejected():
    st = AdamState()
    with pytest.raises(ValueError):
        adam_step(st, {"a": np.zeros(3)}, {"a": np.zeros(4)})


def test_adam_dict_params_updated_in_place():
    st = AdamState(lr=0.1)
    params = {"a": np.ones(2), "b": np.full((2, 2), 3.0)}
    out = adam_step(st, params, {"a": np.ones(2), "b": np.zeros((2, 2))})
    assert out is params
    assert not np.allclose(params["a"], 1.0)
    np.testing.assert_array_equal(params["b"], 3.0)


# ---------------------------------------------------------------------------
# finite_diff_check itself

def test_finite_diff_check_quadratic():
    def f(x):
        return float(x[0] ** 2), np.array([2.0 * x[0]])

    assert finite_diff_check(f, np.array([3.0]), step=1e-5) < 1e-9


def test_finite_diff_check_flags_wrong_gradient():
    def f(x):
        return float(x[0] ** 2), np.array([3.0 * x[0]])  # deliberately wrong

    # analytic 9 vs fd 6 at x=3: |9-6|/max(1,9) = 1/3
    assert finite_diff_check(f, np.array([3.0]), step=1e-5) > 0.3


def test_finite_diff_check_nonfinite_rejected():
    def f(x):
        return float("nan"), np.zeros(1)

    with pytest.raises(FloatingPointError):
        finite_diff_check(f, np.array([0.0]))
