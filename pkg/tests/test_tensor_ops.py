import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xrefine import tensor_ops as ops
from xrefine.gradcheck import check_attention, check_conv2d, numeric_grad, rel_error


def conv_reference(x, k, b, padded):
    # direct quadruple loop, independent of the im2col path
    if padded:
        x = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cin, h, w = x.shape
    cout = k.shape[0]
    out = np.zeros((cout, h - 2, w - 2))
    for o in range(cout):
        for i in range(h - 2):
            for j in range(w - 2):
                out[o, i, j] = np.sum(x[:, i:i + 3, j:j + 3] * k[o]) + b[o]
    return out


def test_conv_shape_unpadded_first_layer():
    x = np.zeros((1, 11, 11))
    out, _ = ops.conv2d(x, np.zeros((16, 1, 3, 3)), np.zeros(16), padded=False)
    assert out.shape == (16, 9, 9)


def test_conv_identity_kernel_padded():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out, _ = ops.conv2d(x, k, np.zeros(1), padded=True)
    np.testing.assert_array_equal(out, x)


def test_conv_all_ones():
    out, _ = ops.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), padded=False)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


@pytest.mark.parametrize("padded", [False, True])
def test_conv_matches_direct_loop(padded):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = ops.conv2d(x, k, b, padded)
    np.testing.assert_allclose(out, conv_reference(x, k, b, padded), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1), False)
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((1, 2, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1), False)
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 5, 5)), np.zeros(1), False)


@given(h=st.integers(3, 9), w=st.integers(3, 9), padded=st.booleans())
@settings(max_examples=30, deadline=None)
def test_conv_shape_law(h, w, padded):
    out, _ = ops.conv2d(np.zeros((2, h, w)), np.zeros((3, 2, 3, 3)), np.zeros(3), padded)
    assert out.shape == ((3, h, w) if padded else (3, h - 2, w - 2))


def test_conv_backward_fd_1x5x5():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 5, 5))
    k = rng.normal(size=(1, 1, 3, 3))
    b = rng.normal(size=1)
    out, cache = ops.conv2d(x, k, b, False)
    g = rng.normal(size=out.shape)
    gx, gk, gb = ops.conv2d_backward(cache, g)

    def f():
        return float((ops.conv2d(x, k, b, False)[0] * g).sum())

    for a, n in ((gx, numeric_grad(f, x, 1e-5)), (gk, numeric_grad(f, k, 1e-5)), (gb, numeric_grad(f, b, 1e-5))):
        assert rel_error(a, n).max() <= 1e-6


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(3)
    out, cache = ops.conv2d(rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3), True)
    for g in ops.conv2d_backward(cache, np.zeros_like(out)):
        assert not np.any(g)


def test_conv_bias_grad_is_spatial_sum():
    rng = np.random.default_rng(4)
    out, cache = ops.conv2d(rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3), False)
    g = rng.normal(size=out.shape)
    _, _, gb = ops.conv2d_backward(cache, g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_random_seeds(seed):
    assert check_conv2d(seed) <= 1e-5


def test_relu_values_and_backward():
    y, mask = ops.relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(ops.relu_backward(mask, np.ones(3)), [0.0, 0.0, 1.0])


def test_relu_backward_fd_away_from_zero():
    x = np.array([-2.0, -0.3, 0.4, 1.7])
    g = np.array([0.5, -1.0, 2.0, 3.0])
    _, mask = ops.relu(x)
    num = numeric_grad(lambda: float((ops.relu(x)[0] * g).sum()), x)
    assert rel_error(ops.relu_backward(mask, g), num).max() <= 1e-6


def test_tanh():
    y, _ = ops.tanh_map(np.array([0.0, 100.0]))
    assert y[0] == 0.0
    assert abs(y[1] - 1.0) <= 1e-12
    x = np.linspace(-2, 2, 9)
    g = np.cos(x)
    _, c = ops.tanh_map(x)
    num = numeric_grad(lambda: float((ops.tanh_map(x)[0] * g).sum()), x)
    assert rel_error(ops.tanh_backward(c, g), num).max() <= 1e-6


def test_softmax_uniform_and_peaked():
    p, _ = ops.softmax(np.full(7, 3.3))
    np.testing.assert_allclose(p, 1 / 7, rtol=1e-15)
    p, _ = ops.softmax(np.array([10.0, 0.0, 0.0]))
    assert p[0] >= 0.9999
    assert p[0] == pytest.approx(1 / (1 + 2 * np.exp(-10.0)), rel=1e-15)


def test_softmax_rejects_nonpositive_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            ops.softmax(np.zeros(3), t)


def test_softmax_backward_fd():
    rng = np.random.default_rng(5)
    x = rng.normal(size=9)
    g = rng.normal(size=9)
    for t in (0.5, 1.0, 2.0):
        _, c = ops.softmax(x, t)
        num = numeric_grad(lambda: float((ops.softmax(x, t)[0] * g).sum()), x)
        assert rel_error(ops.softmax_backward(c, g), num).max() <= 1e-6


@given(
    st.lists(st.floats(-30, 30), min_size=1, max_size=25),
    st.floats(-50, 50),
    st.floats(0.1, 5.0),
)
@settings(max_examples=100, deadline=None)
def test_softmax_sums_to_one_and_shift_invariant(xs, shift, t):
    x = np.array(xs)
    p, _ = ops.softmax(x, t)
    q, _ = ops.softmax(x + shift, t)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-6
    assert np.abs(p - q).max() <= 1e-6


def _identity_attention(d):
    w = {k: np.zeros((d, d)) if k.startswith("w") else np.zeros(d) for k in ops.ATTENTION_KEYS}
    w["wv"] = np.eye(d)
    w["wo"] = np.eye(d)
    return w


def test_attention_degenerate_uniform():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(9, 8))
    out, cache = ops.multi_head_cross_attention(x, x, _identity_attention(8), heads=2)
    np.testing.assert_allclose(ops.attention_weights_of(cache), 1 / 9, rtol=1e-14)
    np.testing.assert_allclose(out, x + x.mean(axis=0), atol=1e-14)


def test_attention_single_token_weight_one():
    rng = np.random.default_rng(7)
    w = {k: rng.normal(size=(4, 4)) if k.startswith("w") else rng.normal(size=4) for k in ops.ATTENTION_KEYS}
    _, cache = ops.multi_head_cross_attention(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), w, heads=1)
    assert np.all(ops.attention_weights_of(cache) == 1.0)


def test_attention_errors():
    w = _identity_attention(6)
    with pytest.raises(ValueError):
        ops.multi_head_cross_attention(np.zeros((9, 6)), np.zeros((9, 6)), w, heads=4)
    with pytest.raises(ValueError):
        ops.multi_head_cross_attention(np.zeros((9, 6)), np.zeros((8, 6)), w, heads=2)


def test_attention_gradcheck_9x16():
    assert check_attention(0, tokens=9, dim=16, heads=4) <= 1e-5


def test_attention_batched_equals_single_bitwise():
    rng = np.random.default_rng(8)
    w = {k: rng.normal(size=(16, 16)).astype(np.float32) if k.startswith("w") else
         rng.normal(size=16).astype(np.float32) for k in ops.ATTENTION_KEYS}
    q = rng.normal(size=(5, 9, 16)).astype(np.float32)
    kv = rng.normal(size=(5, 9, 16)).astype(np.float32)
    batched, _ = ops.multi_head_cross_attention(q, kv, w, 4)
    for i in range(5):
        single, _ = ops.multi_head_cross_attention(q[i], kv[i], w, 4)
        assert np.array_equal(single, batched[i])


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        trace.append(p)
    return trace


def test_adam_first_step_is_lr_sign():
    rng = np.random.default_rng(9)
    g = rng.normal(size=(4, 3))
    p = {"w": np.zeros((4, 3))}
    ops.adam_step(p, {"w": g}, ops.AdamState(), lr=0.01)
    assert np.abs(p["w"]).max() <= 0.01 * (1 + 1e-6)
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-5)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.arange(6.0).reshape(2, 3)}
    state = ops.AdamState()
    for _ in range(5):
        ops.adam_step(p, {"w": np.zeros((2, 3))}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], np.arange(6.0).reshape(2, 3))


def test_adam_matches_scalar_oracle():
    grads = [0.3, 0.3]
    p = {"w": np.array([1.5])}
    state = ops.AdamState()
    expected = scalar_adam(1.5, grads, 0.05)
    for g, e in zip(grads, expected):
        ops.adam_step(p, {"w": np.array([g])}, state, lr=0.05)
        assert p["w"][0] == pytest.approx(e, abs=1e-15)
    assert state.step == 2


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        ops.adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, ops.AdamState())
    with pytest.raises(ValueError):
        ops.adam_step({"w": np.zeros(3)}, {"v": np.zeros(3)}, ops.AdamState())


def test_ops_deterministic():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 7, 7)).astype(np.float32)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = np.zeros(4, dtype=np.float32)
    a1, _ = ops.conv2d(x, k, b, True)
    a2, _ = ops.conv2d(x.copy(), k.copy(), b, True)
    assert a1.tobytes() == a2.tobytes()
