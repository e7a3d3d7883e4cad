import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quant.nn import (
    LOG_2PI,
    Adam,
    Mlp,
    NoForwardRecord,
    NonFiniteGradient,
    clamp_log_std,
    gaussian_nll,
    load_mlps,
    save_mlps,
    squashed_gaussian_sample,
)


def oracle_forward(params, x):
    """Plain matrix arithmetic, written without the Mlp class."""
    h = np.atleast_2d(x)
    layers = len(params) // 2
    for i in range(layers):
        w, b = params[2 * i], params[2 * i + 1]
        z = np.array([[sum(h[r, k] * w[k, c] for k in range(w.shape[0])) + b[c] for c in range(w.shape[1])]
                      for r in range(h.shape[0])])
        h = np.where(z > 0, z, 0.0) if i < layers - 1 else z
    return h


def test_zero_net_outputs_zero():
    net = Mlp((3, 4, 2))
    for p in net.params:
        p[...] = 0.0
    np.testing.assert_array_equal(net.forward(np.ones(3)), [0.0, 0.0])


def test_identity_net():
    net = Mlp((1, 1))
    net.params[0][...] = 1.0
    net.params[1][...] = 0.0
    assert net.forward(np.array([3.0]))[0] == 3.0


def test_forward_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    net = Mlp((4, 6, 5, 3), rng)
    x = rng.normal(size=(7, 4))
    np.testing.assert_allclose(net.forward(x), oracle_forward(net.params, x), atol=1e-10)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        Mlp((3, 2)).forward(np.ones(4))


def test_backward_requires_forward():
    with pytest.raises(NoForwardRecord):
        Mlp((2, 2)).backward(None, np.ones((1, 2)))


def test_backward_finite_differences():
    rng = np.random.default_rng(1)
    net = Mlp((3, 8, 8, 2), rng)
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 2))
    _, tape = net.forward_record(x)
    grads, dx = net.backward(tape, up)
    h = 1e-5
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = net.flat()
    numeric = np.empty_like(theta)
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += h
        net.set_flat(t)
        f1 = float(np.sum(net.forward(x) * up))
        t[i] -= 2 * h
        net.set_flat(t)
        f2 = float(np.sum(net.forward(x) * up))
        numeric[i] = (f1 - f2) / (2 * h)
    net.set_flat(theta)
    rel = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
    assert rel < 1e-4
    # input gradient
    num_dx = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num_dx[idx] = (np.sum(net.forward(xp) * up) - np.sum(net.forward(xm) * up)) / (2 * h)
    np.testing.assert_allclose(dx, num_dx, rtol=1e-4, atol=1e-7)


def test_backward_zero_upstream():
    net = Mlp((3, 4, 2), np.random.default_rng(2))
    _, tape = net.forward_record(np.ones((2, 3)))
    grads, dx = net.backward(tape, np.zeros((2, 2)))
    assert all(not g.any() for g in grads) and not dx.any()


def test_linear_layer_gradient_is_input():
    net = Mlp((3, 1), np.random.default_rng(3))
    x = np.array([[1.5, -2.0, 0.25]])
    _, tape = net.forward_record(x)
    grads, _ = net.backward(tape, np.ones((1, 1)))
    np.testing.assert_array_equal(grads[0][:, 0], x[0])
    assert grads[1][0] == 1.0


def test_adam_first_step():
    w = np.array([0.5])
    opt = Adam([w], lr=1e-3)
    opt.step([np.array([1.0])])
    assert w[0] == pytest.approx(0.5 - 1e-3, rel=1e-6)


def test_adam_zero_gradient():
    w = np.array([0.5, -1.0])
    opt = Adam([w], lr=1e-3)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(w, [0.5, -1.0])
    assert opt.t == 1


def test_adam_converges_on_quadratic_like_oracle():
    w = np.array([0.0])
    opt = Adam([w], lr=0.1)
    # independent scalar recursion
    v_w, m, v = 0.0, 0.0, 0.0
    for t in range(1, 201):
        opt.step([2.0 * (w - 3.0)])
        g = 2.0 * (v_w - 3.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        v_w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(w[0] - 3.0) < 0.1
    assert w[0] == pytest.approx(v_w, abs=1e-12)


def test_adam_rejects_non_finite():
    net = Mlp((2, 2))
    opt = Adam(net.params, names=net.names)
    grads = [np.zeros_like(p) for p in net.params]
    grads[1][0] = np.nan
    with pytest.raises(NonFiniteGradient, match="b0"):
        opt.step(grads)


def test_gaussian_nll_closed_form():
    loss, _, _ = gaussian_nll(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    assert loss == pytest.approx(3 * 0.5 * LOG_2PI)
    assert 0.5 * LOG_2PI == pytest.approx(0.9189385332, abs=1e-10)


def test_gaussian_nll_blows_up_as_sigma_shrinks():
    err = np.ones((1, 1))
    a = gaussian_nll(np.zeros((1, 1)), np.full((1, 1), -1.0), err)[0]
    b = gaussian_nll(np.zeros((1, 1)), np.full((1, 1), -3.0), err)[0]
    c = gaussian_nll(np.zeros((1, 1)), np.full((1, 1), -6.0), err)[0]
    assert a < b < c


def test_gaussian_nll_gradients():
    rng = np.random.default_rng(4)
    mean, log_std, target = rng.normal(size=(3, 5, 2))
    _, d_mean, d_ls = gaussian_nll(mean, log_std, target)
    h = 1e-6
    for arr, grad in ((mean, d_mean), (log_std, d_ls)):
        num = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = gaussian_nll(mean, log_std, target)[0]
            arr[idx] = orig - h
            down = gaussian_nll(mean, log_std, target)[0]
            arr[idx] = orig
            num[idx] = (up - down) / (2 * h)
        assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-4


def test_clamp_log_std():
    out, mask = clamp_log_std(np.array([-30.0, 0.0, 5.0]))
    np.testing.assert_array_equal(out, [-20.0, 0.0, 2.0])
    np.testing.assert_array_equal(mask, [0.0, 1.0, 0.0])


def test_squashed_sample_closed_form():
    a, logp, _ = squashed_gaussian_sample(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert a[0, 0] == 0.0
    assert logp[0] == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)


def test_squashed_sample_mode():
    mu = np.array([[0.3, -1.2]])
    a, _, _ = squashed_gaussian_sample(mu, np.zeros((1, 2)), np.zeros((1, 2)))
    np.testing.assert_allclose(a, np.tanh(mu))


def test_squashed_density_normalizes():
    rng = np.random.default_rng(5)
    mu, log_sigma = 0.3, math.log(0.8)
    a = rng.uniform(-1, 1, size=100_000)
    u = np.arctanh(a)
    z = (u - mu) / math.exp(log_sigma)
    _, logp, _ = squashed_gaussian_sample(np.full((len(a), 1), mu), np.full((len(a), 1), log_sigma), z[:, None])
    integral = 2.0 * np.mean(np.exp(logp))
    assert abs(integral - 1.0) < 0.02


@given(st.floats(-50, 50), st.floats(-20, 2), st.floats(-10, 10))
@settings(max_examples=200, deadline=None)
def test_squashed_sample_bounded_and_finite(mu, log_std, z):
    a, logp, _ = squashed_gaussian_sample(np.array([[mu]]), np.array([[log_std]]), np.array([[z]]))
    assert -1.0 < a[0, 0] < 1.0
    assert np.isfinite(logp[0])


def test_checkpoint_round_trip_bit_exact():
    rng = np.random.default_rng(6)
    nets = {"a": Mlp((3, 5, 2), rng), "b": Mlp((2, 1), rng)}
    blob = save_mlps(nets, {"note": np.array([1.5, 2.5])})
    loaded, extra = load_mlps(blob)
    for name, net in nets.items():
        assert loaded[name].sizes == net.sizes
        for p, q in zip(net.params, loaded[name].params):
            assert p.tobytes() == q.tobytes()
    np.testing.assert_array_equal(extra["note"], [1.5, 2.5])


def test_same_seed_same_parameters():
    a = Mlp((4, 8, 2), np.random.default_rng(7))
    b = Mlp((4, 8, 2), np.random.default_rng(7))
    assert a.flat().tobytes() == b.flat().tobytes()


def test_polyak_and_copy():
    rng = np.random.default_rng(8)
    src, dst = Mlp((2, 3, 1), rng), Mlp((2, 3, 1), rng)
    before = dst.flat()
    dst.polyak_from(src, 0.1)
    np.testing.assert_allclose(dst.flat(), 0.9 * before + 0.1 * src.flat())
    c = src.copy()
    c.params[0][0, 0] += 1.0
    assert c.params[0][0, 0] != src.params[0][0, 0]
