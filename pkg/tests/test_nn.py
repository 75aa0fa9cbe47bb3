import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsembed import nn
from kwsembed.nn import AdamState, ConvParams, DenseParams, ShapeError


def conv(axis, cin, cout, rng=None, padding="same", dtype=np.float64):
    if rng is None:
        w = np.zeros((3, cin, cout), dtype)
    else:
        w = rng.standard_normal((3, cin, cout)).astype(dtype)
    return ConvParams(axis, w, np.zeros(cout, dtype), padding)


def identity_conv(axis, c):
    p = conv(axis, c, c)
    p.weight[1] = np.eye(c)
    return p


# --- conv -------------------------------------------------------------------


@pytest.mark.parametrize("axis", ["time", "freq"])
def test_conv_identity(axis, rng):
    x = rng.standard_normal((5, 4, 3))
    y = nn.conv3_forward(x, identity_conv(axis, 3))
    np.testing.assert_array_equal(y, x)


def test_conv_ones_time_axis():
    x = np.ones((5, 1, 1))
    p = conv("time", 1, 1)
    p.weight[:] = 1.0
    np.testing.assert_array_equal(nn.conv3_forward(x, p)[:, 0, 0], [2, 3, 3, 3, 2])


def test_conv_bias_only(rng):
    p = conv("freq", 2, 3)
    p.bias[:] = [0.5, -1.0, 2.0]
    y = nn.conv3_forward(rng.standard_normal((4, 6, 2)), p)
    np.testing.assert_array_equal(y, np.broadcast_to(p.bias, (4, 6, 3)))


def test_conv_valid_padding_shrinks(rng):
    p = conv("time", 2, 2, rng, padding="valid")
    x = rng.standard_normal((6, 3, 2))
    y = nn.conv3_forward(x, p)
    assert y.shape == (4, 3, 2)
    # brute force
    expected = np.zeros_like(y)
    for t in range(4):
        for k in range(3):
            expected[t] += x[t + k] @ p.weight[k]
    np.testing.assert_allclose(y, expected)


@pytest.mark.parametrize("axis", ["time", "freq"])
def test_conv_matches_brute_force(axis, rng):
    p = conv(axis, 2, 3, rng)
    p.bias[:] = rng.standard_normal(3)
    x = rng.standard_normal((4, 5, 2))
    y = nn.conv3_forward(x, p)
    ax = 0 if axis == "time" else 1
    xp = np.pad(x, [(1, 1) if i == ax else (0, 0) for i in range(3)])
    expected = np.zeros((4, 5, 3))
    for t in range(4):
        for f in range(5):
            for k in range(3):
                src = xp[t + k, f] if ax == 0 else xp[t, f + k]
                expected[t, f] += src @ p.weight[k]
    np.testing.assert_allclose(y, expected + p.bias)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        nn.conv3_forward(rng.standard_normal((4, 4, 3)), conv("time", 2, 2))
    with pytest.raises(ShapeError):
        nn.conv3_forward(rng.standard_normal((2, 4, 2)), conv("time", 2, 2, padding="valid"))
    with pytest.raises(ShapeError):
        nn.conv3_backward(np.zeros((4, 4, 2)), conv("time", 2, 2), np.zeros((4, 4, 3)))


def test_conv_backward_zero_grad(rng):
    p = conv("time", 2, 3, rng)
    x = rng.standard_normal((4, 4, 2))
    gx, gw, gb = nn.conv3_backward(x, p, np.zeros((4, 4, 3)))
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("axis", ["time", "freq"])
def test_conv_backward_identity(axis, rng):
    g = rng.standard_normal((4, 4, 2))
    gx, _, _ = nn.conv3_backward(rng.standard_normal((4, 4, 2)), identity_conv(axis, 2), g)
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize("axis", ["time", "freq"])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_gradient_fd(axis, padding, rng):
    p = conv(axis, 2, 3, rng, padding)
    x = rng.standard_normal((4, 4, 2))
    out = nn.conv3_forward(x, p)
    r = rng.standard_normal(out.shape)

    def f(x, w, b):
        q = ConvParams(axis, w, b, padding)
        y = nn.conv3_forward(x, q)
        gx, gw, gb = nn.conv3_backward(x, q, r)
        return float(np.sum(r * y)), [gx, gw, gb]

    assert nn.gradient_check(f, [x, p.weight, p.bias]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1000), st.sampled_from(["time", "freq"]))
def test_conv_linear_without_bias(a, seed, axis):
    rng = np.random.default_rng(seed)
    p = conv(axis, 2, 2, rng)
    x = rng.standard_normal((5, 4, 2))
    np.testing.assert_allclose(nn.conv3_forward(a * x, p), a * nn.conv3_forward(x, p), atol=1e-9)


def test_conv_batched_matches_single(rng):
    p = conv("freq", 2, 3, rng)
    xs = rng.standard_normal((3, 4, 5, 2))
    batched = nn.conv3_forward(xs, p)
    for i in range(3):
        np.testing.assert_allclose(batched[i], nn.conv3_forward(xs[i], p))


# --- maxpool ----------------------------------------------------------------


def test_maxpool_constant():
    y, _ = nn.maxpool_forward(np.full((4, 4, 2), 3.0), 2, 2)
    np.testing.assert_array_equal(y, np.full((2, 2, 2), 3.0))


def test_maxpool_window_max():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    y, _ = nn.maxpool_forward(x, 2, 2)
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 4.0


def test_maxpool_floor_semantics(rng):
    x = rng.standard_normal((5, 2, 1))
    x[4] = 100.0  # dropped frame
    y, _ = nn.maxpool_forward(x, 2, 1)
    assert y.shape == (2, 2, 1)
    assert y.max() < 100.0


def test_maxpool_pool_one_is_identity(rng):
    x = rng.standard_normal((3, 4, 2))
    y, idx = nn.maxpool_forward(x, 1, 1)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(nn.maxpool_backward(idx, x), x)


def test_maxpool_errors(rng):
    with pytest.raises(ShapeError):
        nn.maxpool_forward(rng.standard_normal((1, 4, 2)), 2, 1)
    with pytest.raises(ValueError):
        nn.maxpool_forward(rng.standard_normal((4, 4, 2)), 0, 1)
    _, idx = nn.maxpool_forward(rng.standard_normal((4, 4, 2)), 2, 2)
    with pytest.raises(ShapeError):
        nn.maxpool_backward(idx, np.zeros((2, 2, 3)))


def test_maxpool_tie_goes_to_lowest_index():
    x = np.zeros((2, 2, 1))
    _, idx = nn.maxpool_forward(x, 2, 2)
    g = nn.maxpool_backward(idx, np.ones((1, 1, 1)))
    assert g[0, 0, 0] == 1.0 and g.sum() == 1.0


def test_maxpool_backward_zero_and_single(rng):
    x = rng.standard_normal((2, 2, 1))
    _, idx = nn.maxpool_forward(x, 2, 2)
    assert not nn.maxpool_backward(idx, np.zeros((1, 1, 1))).any()
    g = nn.maxpool_backward(idx, np.ones((1, 1, 1)))
    assert g.sum() == 1.0
    assert g.reshape(-1)[np.argmax(x)] == 1.0


def test_maxpool_brute_force(rng):
    x = rng.standard_normal((7, 5, 3))
    y, _ = nn.maxpool_forward(x, 2, 2)
    for t in range(3):
        for f in range(2):
            for c in range(3):
                assert y[t, f, c] == x[2 * t : 2 * t + 2, 2 * f : 2 * f + 2, c].max()


def test_maxpool_gradient_fd(rng):
    # distinct values spaced well beyond eps so no window has near-ties
    x = rng.permutation(6 * 4 * 3).reshape(6, 4, 3).astype(np.float64) * 0.01
    y, _ = nn.maxpool_forward(x, 2, 2)
    r = rng.standard_normal(y.shape)

    def f(x):
        y, idx = nn.maxpool_forward(x, 2, 2)
        return float(np.sum(r * y)), [nn.maxpool_backward(idx, r)]

    assert nn.gradient_check(f, [x]) < 1e-4


# --- relu / dense / loss ----------------------------------------------------


def test_relu_values_and_grad():
    x = np.array([-1.0, 2.0, 3.0, -3.0])
    np.testing.assert_array_equal(nn.relu(x), [0.0, 2.0, 3.0, 0.0])
    np.testing.assert_array_equal(nn.relu_backward(x, np.ones(4)), [0.0, 1.0, 1.0, 0.0])


def test_dense_identity_and_bias(rng):
    v = rng.standard_normal(5)
    np.testing.assert_allclose(nn.dense_forward(v, DenseParams(np.eye(5), np.zeros(5))), v)
    b = rng.standard_normal(3)
    np.testing.assert_array_equal(nn.dense_forward(v, DenseParams(np.zeros((5, 3)), b)), b)
    with pytest.raises(ShapeError):
        nn.dense_forward(np.zeros(4), DenseParams(np.zeros((5, 3)), b))


def test_dense_gradient_fd(rng):
    w = rng.standard_normal((96, 35)) * 0.1
    b = rng.standard_normal(35)
    v = rng.standard_normal(96)
    r = rng.standard_normal(35)

    def f(v, w, b):
        p = DenseParams(w, b)
        return float(r @ nn.dense_forward(v, p)), list(nn.dense_backward(v, p, r))

    assert nn.gradient_check(f, [v, w, b]) < 1e-5


def test_softmax_xent_examples():
    loss, _ = nn.softmax_xent(np.zeros(35), 3)
    assert loss == pytest.approx(math.log(35), abs=1e-12)
    assert math.log(35) == pytest.approx(3.5553, abs=1e-4)
    loss, _ = nn.softmax_xent(np.array([100.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-40)
    _, g = nn.softmax_xent(np.array([0.0, 0.0]), 0)
    np.testing.assert_allclose(g, [-0.5, 0.5])


def test_softmax_xent_errors():
    with pytest.raises(ValueError):
        nn.softmax_xent(np.zeros(3), 3)
    with pytest.raises(ValueError):
        nn.softmax_xent(np.array([np.inf, 0.0]), 0)


def test_softmax_xent_stable_for_huge_logits():
    loss, g = nn.softmax_xent(np.array([1e4, -1e4, 0.0]), 1)
    assert np.isfinite(loss) and np.all(np.isfinite(g))
    assert loss == pytest.approx(2e4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40), st.data())
def test_softmax_xent_properties(logits, data):
    z = np.array(logits)
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, g = nn.softmax_xent(z, label)
    assert loss >= 0
    assert abs(g.sum()) < 1e-9


def test_softmax_xent_batch_is_mean(rng):
    z = rng.standard_normal((4, 5))
    y = np.array([0, 1, 4, 2])
    loss, g = nn.softmax_xent(z, y)
    singles = [nn.softmax_xent(z[i], y[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(g, np.stack([s[1] for s in singles]) / 4)


def test_softmax_xent_gradient_fd(rng):
    z = rng.standard_normal(7)

    def f(z):
        return nn.softmax_xent(z, 2)[0], [nn.softmax_xent(z, 2)[1]]

    assert nn.gradient_check(f, [z]) < 1e-6


# --- adam -------------------------------------------------------------------


def test_adam_zero_grad_keeps_params():
    p = np.array([1.0, -2.0])
    st_ = AdamState.for_params(p)
    nn.adam_step(p, np.zeros(2), st_)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step():
    p = np.array([0.0])
    nn.adam_step(p, np.array([1.0]), AdamState.for_params(p, lr=1e-3))
    # m_hat = 1, v_hat = 1 -> delta = -lr * 1 / (1 + 1e-8)
    assert p[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_params_independent():
    p = np.array([0.0, 0.0])
    st_ = AdamState.for_params(p)
    nn.adam_step(p, np.array([1.0, 0.0]), st_)
    assert p[0] != 0.0 and p[1] == 0.0


def test_adam_matches_reference_loop(rng):
    p = rng.standard_normal(4)
    ref = p.copy()
    st_ = AdamState.for_params(p, lr=0.01)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        nn.adam_step(p, g, st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        nn.adam_step(np.zeros(2), np.zeros(3), AdamState.for_params(np.zeros(2)))


# --- gradient checker -------------------------------------------------------


def test_gradient_check_detects_wrong_gradient(rng):
    x = rng.standard_normal(5)
    good = lambda x: (float(np.sum(x**2)), [2 * x])
    bad = lambda x: (float(np.sum(x**2)), [3 * x])
    assert nn.gradient_check(good, [x]) < 1e-8
    assert nn.gradient_check(bad, [x]) > 0.1


@pytest.mark.parametrize("eps", [0.0, -1e-4])
def test_gradient_check_rejects_bad_eps(eps):
    with pytest.raises(ValueError):
        nn.gradient_check(lambda x: (0.0, [x]), [np.zeros(2)], eps=eps)


def test_forward_deterministic(rng):
    p = conv("time", 3, 4, rng, dtype=np.float32)
    x = rng.standard_normal((8, 6, 3)).astype(np.float32)
    assert nn.conv3_forward(x, p).tobytes() == nn.conv3_forward(x.copy(), p).tobytes()
