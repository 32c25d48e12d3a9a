"""Gradient correctness via finite differences, plus optimiser behavior.

The oracle is central differencing in float64: for a scalar function f
of tensor entries, df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / 2h.  A local
implementation (independent of the package's own checker) audits the
core ops; the package checker is then used for breadth.
"""

import numpy as np
import pytest

from onix4d import autodiff as ad


def fd_grad(f, tensors, h=1e-6):
    """Local central-difference oracle (float64 tensors)."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*tensors).data)
            flat[i] = orig - h
            fm = float(f(*tensors).data)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(f, tensors):
    for t in tensors:
        t.grad = None
    out = f(*tensors)
    ad.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]


def assert_matches_fd(f, tensors, rtol=1e-5, h=1e-6):
    ana = analytic_grads(f, tensors)
    num = fd_grad(f, tensors, h)
    for a, n in zip(ana, num):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=1e-8)


def t64(rng, shape, scale=1.0):
    return ad.Tensor(rng.normal(0.0, scale, size=shape).astype(np.float64))


# ---------------------------------------------------------------------------
# hand-derived scalar cases
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero():
    x = ad.Tensor(np.zeros(1, dtype=np.float64))
    y = ad.sigmoid(x)
    ad.backward(ad.tensor_sum(y))
    assert y.data[0] == pytest.approx(0.5)
    assert x.grad[0] == pytest.approx(0.25)


def test_softplus_matches_log1p_exp():
    x = ad.Tensor(np.array([-30.0, -1.0, 0.0, 1.0, 30.0]))
    y = ad.softplus(x)
    np.testing.assert_allclose(y.data, np.log1p(np.exp(np.clip(x.data, None, 30))), rtol=1e-6)
    assert np.all(y.data >= 0)


def test_product_rule_shared_parent():
    # d(x*x)/dx = 2x; the same tensor appears as both parents.
    x = ad.Tensor(np.array([3.0], dtype=np.float64))
    y = ad.mul(x, x)
    ad.backward(ad.tensor_sum(y))
    assert x.grad[0] == pytest.approx(6.0)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(1, 1, 5, 5)).astype(np.float64)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.Tensor(img), ad.Tensor(w), stride=1, padding=1)
    np.testing.assert_allclose(out.data, img, rtol=0, atol=0)


def test_conv2d_against_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    stride, pad = 2, 1
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride, padding=pad).data

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[2] + 2 * pad - 3) // stride + 1
    wo = (x.shape[3] + 2 * pad - 3) // stride + 1
    ref = np.zeros((2, 4, ho, wo))
    for bi in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[bi, o, i, j] = np.sum(patch * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_bilinear_sample_against_manual_interpolation():
    rng = np.random.default_rng(2)
    maps = rng.normal(size=(2, 3, 4, 5))
    xy = np.array([[1.25, 2.5], [0.0, 0.0], [3.9, 2.1]])
    idx = np.array([0, 1, 1])
    out = ad.bilinear_sample(ad.Tensor(maps), idx, xy).data
    for k, (x, y) in enumerate(xy):
        m = maps[idx[k]]
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        ref = (m[:, y0, x0] * (1 - fx) * (1 - fy) + m[:, y0, x0 + 1] * fx * (1 - fy)
               + m[:, y0 + 1, x0] * (1 - fx) * fy + m[:, y0 + 1, x0 + 1] * fx * fy)
        np.testing.assert_allclose(out[k], ref, rtol=1e-6)


def test_bilinear_sample_zero_outside():
    maps = ad.Tensor(np.ones((1, 2, 4, 4)))
    xy = np.array([[-1.5, 0.0], [0.0, -1.5], [5.0, 2.0], [2.0, 7.0]])
    out = ad.bilinear_sample(maps, np.zeros(4, dtype=int), xy)
    np.testing.assert_allclose(out.data, 0.0)


# ---------------------------------------------------------------------------
# finite-difference audits (local oracle)
# ---------------------------------------------------------------------------

def test_fd_pointwise_chain():
    rng = np.random.default_rng(3)
    assert_matches_fd(lambda a, b: ad.tensor_sum(ad.mul(ad.exp(a), ad.add(a, b))),
                      [t64(rng, (4, 3), 0.5), t64(rng, (4, 3), 0.5)])


def test_fd_log_sigmoid_softplus():
    rng = np.random.default_rng(4)
    x = ad.Tensor(rng.uniform(0.5, 2.0, size=(6,)))
    assert_matches_fd(lambda a: ad.tensor_sum(ad.log(a)), [x])
    assert_matches_fd(lambda a: ad.tensor_sum(ad.sigmoid(ad.mul(a, a))), [t64(rng, (5,))])
    assert_matches_fd(lambda a: ad.tensor_sum(ad.softplus(a)), [t64(rng, (5,), 2.0)])


def test_fd_linear_and_conv():
    rng = np.random.default_rng(5)
    assert_matches_fd(lambda x, w, b: ad.tensor_mean(ad.mul(ad.linear(x, w, b),
                                                            ad.linear(x, w, b))),
                      [t64(rng, (3, 4)), t64(rng, (4, 2)), t64(rng, (2,))])
    assert_matches_fd(lambda x, w, b: ad.tensor_sum(ad.mul(
        ad.conv2d(x, w, b, stride=2, padding=1),
        ad.conv2d(x, w, b, stride=2, padding=1))),
        [t64(rng, (2, 2, 5, 5)), t64(rng, (3, 2, 3, 3)), t64(rng, (3,))])


def test_fd_pool_reduce_reshape_concat_transpose():
    rng = np.random.default_rng(6)
    assert_matches_fd(lambda x: ad.tensor_sum(ad.mul(ad.avg_pool2(x), ad.avg_pool2(x))),
                      [t64(rng, (1, 2, 4, 6))])
    assert_matches_fd(lambda x: ad.tensor_sum(ad.mul(ad.tensor_mean(x, axis=0),
                                                     ad.tensor_mean(x, axis=0))),
                      [t64(rng, (3, 4))])
    assert_matches_fd(lambda a, b: ad.tensor_sum(ad.mul(
        ad.concat([a, b], axis=1), ad.concat([a, b], axis=1))),
        [t64(rng, (2, 3)), t64(rng, (2, 2))])
    assert_matches_fd(lambda a: ad.tensor_sum(ad.mul(
        ad.transpose(ad.reshape(a, (3, 2)), (1, 0)),
        ad.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3)))),
        [t64(rng, (6,))])


def test_fd_bilinear_sample():
    rng = np.random.default_rng(7)
    maps = t64(rng, (2, 3, 5, 5))
    xy = rng.uniform(-0.5, 4.5, size=(7, 2))
    idx = rng.integers(0, 2, size=7)
    assert_matches_fd(lambda m: ad.tensor_sum(ad.mul(
        ad.bilinear_sample(m, idx, xy), ad.bilinear_sample(m, idx, xy))), [maps])


def test_fd_broadcast_add_mul():
    rng = np.random.default_rng(8)
    assert_matches_fd(lambda a, b: ad.tensor_sum(ad.mul(ad.add(a, b), ad.add(a, b))),
                      [t64(rng, (4, 3)), t64(rng, (3,))])
    assert_matches_fd(lambda a, s: ad.tensor_sum(ad.mul(a, s)),
                      [t64(rng, (2, 3)), t64(rng, ())])


def test_fd_clamp_passes_gradient_inside_only():
    x = ad.Tensor(np.array([-0.5, 0.2, 0.9, 1.5], dtype=np.float64))
    y, n_clipped = ad.clamp(x, 0.0, 1.0)
    ad.backward(ad.tensor_sum(y))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0, 0.0])
    assert n_clipped == 2


# ---------------------------------------------------------------------------
# three-layer MLP, both dtypes (the package checker)
# ---------------------------------------------------------------------------

def _mlp_case(dtype):
    rng = np.random.default_rng(9)
    x = ad.Tensor(rng.normal(size=(5, 3)).astype(dtype))
    params = [ad.Tensor(rng.normal(0, 0.5, size=s).astype(dtype))
              for s in [(3, 8), (8,), (8, 8), (8,), (8, 2), (2,)]]

    def f(w1, b1, w2, b2, w3, b3):
        h = ad.leaky_relu(ad.linear(x, w1, b1), 0.2)
        h = ad.sigmoid(ad.linear(h, w2, b2))
        return ad.tensor_mean(ad.mul(ad.linear(h, w3, b3), ad.linear(h, w3, b3)))

    return f, params


def test_mlp_fd_float64_under_1e4():
    f, params = _mlp_case(np.float64)
    assert ad.check_gradients(f, params, h=1e-5) < 1e-4


def test_mlp_fd_float32_under_1e3():
    # Grads computed in float32, differences taken in float64 copies.
    f, params32 = _mlp_case(np.float32)
    ana = analytic_grads(f, params32)
    f64, params64 = _mlp_case(np.float64)
    num = fd_grad(f64, params64, h=1e-4)
    for a, n in zip(ana, num):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
        assert np.max(np.abs(a - n) / denom) < 1e-3


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------

def test_unreached_parameter_gets_no_gradient():
    store = ad.ParamStore(seed=0, dtype=np.float64)
    used = store.param("used", (3, 2))
    unused = store.param("unused", (4, 4))
    x = ad.Tensor(np.ones((2, 3)))
    loss = ad.tensor_sum(ad.linear(x, used))
    ad.backward(loss)
    assert used.grad is not None
    assert unused.grad is None  # exactly zero contribution


def test_backward_needs_scalar_root():
    x = ad.Tensor(np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.add(x, x))


def test_backward_deterministic_bitwise():
    def build():
        rng = np.random.default_rng(11)
        a = ad.Tensor(rng.normal(size=(6, 4)).astype(np.float32))
        w = ad.Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        h = ad.leaky_relu(ad.linear(a, w), 0.2)
        loss = ad.tensor_mean(ad.mul(h, h))
        ad.backward(loss)
        return w.grad.copy()

    g1, g2 = build(), build()
    assert np.array_equal(g1, g2)


def test_grad_accumulates_across_backward_calls():
    w = ad.Tensor(np.ones(3, dtype=np.float64))
    for _ in range(2):
        loss = ad.tensor_sum(ad.mul(w, ad.Tensor(np.array([1.0, 2.0, 3.0]))))
        ad.backward(loss)
    np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0])


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.linear(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))
    with pytest.raises(ad.ShapeError):
        ad.avg_pool2(ad.Tensor(np.ones((1, 1, 3, 4))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(ad.Tensor(np.ones((1, 1, 2, 2))), ad.Tensor(np.ones((1, 1, 5, 5))))


# ---------------------------------------------------------------------------
# parameters and Adam
# ---------------------------------------------------------------------------

def test_param_init_deterministic_and_order_free():
    s1 = ad.ParamStore(seed=7)
    a1 = s1.param("alpha", (4, 4))
    b1 = s1.param("beta", (4, 4))
    s2 = ad.ParamStore(seed=7)
    b2 = s2.param("beta", (4, 4))   # reversed creation order
    a2 = s2.param("alpha", (4, 4))
    assert np.array_equal(a1.data, a2.data)
    assert np.array_equal(b1.data, b2.data)
    assert not np.array_equal(a1.data, b1.data)


def test_he_uniform_bounds():
    s = ad.ParamStore(seed=0)
    w = s.param("w", (64, 32))
    limit = np.sqrt(6.0 / 64)
    assert np.all(np.abs(w.data) <= limit)
    assert np.abs(w.data).max() > 0.5 * limit


def test_adam_zero_grad_is_noop():
    s = ad.ParamStore(seed=0, dtype=np.float64)
    w = s.param("w", (3,), init="ones")
    opt = ad.Adam(s, lr=0.1)
    w.grad = np.zeros(3)
    opt.step()
    np.testing.assert_allclose(w.data, 1.0)


def test_adam_skips_nonfinite_grads():
    s = ad.ParamStore(seed=0, dtype=np.float64)
    w = s.param("w", (2,), init="ones")
    opt = ad.Adam(s, lr=0.1)
    w.grad = np.array([np.nan, 1.0])
    opt.step()
    np.testing.assert_allclose(w.data, 1.0)
    assert opt.skipped == 1


def _reference_adam(w0, grads_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar reference: the textbook update applied per coordinate."""
    w = np.array(w0, dtype=np.float64)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, steps + 1):
        g = grads_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        w = w - lr * mh / (np.sqrt(vh) + eps)
    return w


def test_adam_matches_reference_on_quadratic():
    # minimize 0.5 * (w - c)^T diag(2, 5) (w - c)
    c = np.array([1.0, -2.0])
    scale = np.array([2.0, 5.0])

    s = ad.ParamStore(seed=0, dtype=np.float64)
    w = s.param("w", (2,), init=np.zeros(2))
    opt = ad.Adam(s, lr=0.05)
    for _ in range(200):
        s.zero_grad()
        diff = ad.add(w, ad.Tensor(-c))
        loss = ad.tensor_sum(ad.mul(ad.mul(diff, diff), ad.Tensor(0.5 * scale)))
        ad.backward(loss)
        opt.step()

    ref = _reference_adam(np.zeros(2), lambda x: scale * (x - c), lr=0.05, steps=200)
    np.testing.assert_allclose(w.data, ref, rtol=1e-10)
    assert np.all(np.abs(w.data - c) < 1e-2) or np.linalg.norm(w.data - ref) < 1e-9


def test_state_dict_roundtrip():
    s = ad.ParamStore(seed=1)
    s.param("w", (3, 3))
    s.param("b", (3,), init="zeros")
    state = s.state_dict()
    s2 = ad.ParamStore(seed=99)
    s2.load_state_dict(state)
    assert np.array_equal(s2["w"].data, s["w"].data)
    with pytest.raises(ad.ShapeError):
        s2.load_state_dict({"w": np.zeros((2, 2))})
