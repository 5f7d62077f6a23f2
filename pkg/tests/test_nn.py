import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmg_lab.nn import (
    AdamState,
    Mlp,
    adam_step,
    expectile_loss,
    generalization_probe,
    grad,
    load_params,
    polyak_update,
    save_params,
)


def matmul_oracle(net, x):
    """Straight-line forward pass written against raw numpy slices."""
    p = net.params
    h = np.asarray(x, float)
    i = 0
    sizes = net.sizes
    for k, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = p[i:i + m * n].reshape(m, n)
        i += m * n
        b = p[i:i + n]
        i += n
        h = h @ W + b
        if k < len(sizes) - 2:
            h = np.maximum(h, 0) if net.activation == "relu" else np.log1p(np.exp(h))
    return np.tanh(h) if net.out_activation == "tanh" else h


def fd_grad(f, x, idx, h=1e-6):
    out = []
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


def test_zero_net_outputs_zero():
    net = Mlp((3, 4, 2))
    np.testing.assert_array_equal(net.forward(np.ones(3)), np.zeros(2))


def test_identity_linear_layer():
    net = Mlp((3, 3))
    W, b = net.layers()[0]
    W[...] = np.eye(3)
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(net.forward(x), x)


def test_shape_mismatch_and_param_count():
    net = Mlp((3, 5, 1))
    assert net.n_params == 3 * 5 + 5 + 5 + 1
    with pytest.raises(ValueError):
        net.forward(np.ones(4))
    with pytest.raises(ValueError):
        Mlp((3, 1), params=np.zeros(3))


@pytest.mark.parametrize("act,out", [("relu", "identity"), ("softplus", "identity"), ("relu", "tanh")])
def test_forward_matches_oracle(act, out):
    rng = np.random.default_rng(0)
    net = Mlp.init((4, 7, 5, 3), rng, act, out)
    x = rng.normal(size=(6, 4))
    np.testing.assert_allclose(net.forward(x), matmul_oracle(net, x), atol=1e-12)
    np.testing.assert_allclose(net.forward(x[0]), matmul_oracle(net, x[0]), atol=1e-12)


def test_constant_loss_zero_gradient():
    net = Mlp.init((3, 4, 1), np.random.default_rng(1))
    loss, g = grad(net, np.ones((2, 3)), lambda out: (1.5, np.zeros_like(out)))
    assert loss == 1.5
    assert not g.any()


def test_linear_quadratic_closed_form():
    rng = np.random.default_rng(2)
    net = Mlp.init((3, 2), rng)
    x = rng.normal(size=(5, 3))
    _, g = grad(net, x, lambda out: ((out**2).sum(), 2 * out))
    W, b = net.layers()[0]
    y = x @ W + b
    np.testing.assert_allclose(g[:6].reshape(3, 2), 2 * x.T @ y, atol=1e-12)
    np.testing.assert_allclose(g[6:], 2 * y.sum(axis=0), atol=1e-12)


def test_nonfinite_loss_rejected():
    net = Mlp.init((2, 1), np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        grad(net, np.ones(2), lambda out: (np.nan, out))


def test_relu_kink_one_sided():
    net = Mlp((1, 1, 1), params=np.array([1.0, 0.0, 1.0, 0.0]))
    g = net.param_grad(np.array([0.0]))
    # pre-activation is exactly 0: the hidden unit contributes nothing
    np.testing.assert_array_equal(g, [0.0, 0.0, 0.0, 1.0])


@pytest.mark.parametrize("act,out", [("relu", "identity"), ("softplus", "identity"), ("softplus", "tanh")])
def test_gradients_match_finite_differences(act, out):
    for seed in range(30):
        rng = np.random.default_rng(seed)
        net = Mlp.init((3, 6, 4, 2), rng, act, out)
        x = rng.normal(size=(5, 3))
        c = rng.normal(size=(5, 2))

        def loss(p):
            return float((c * net.forward(x, p) ** 2).sum())

        out_, cache = net.forward_cache(x)
        g, gx = net.backward(cache, 2 * c * out_)
        idx = rng.choice(net.n_params, size=12, replace=False)
        assert rel_err(g[idx], fd_grad(loss, net.params.copy(), idx)) < 1e-4

        def loss_x(xf):
            return float((c * net.forward(xf.reshape(5, 3)) ** 2).sum())

        assert rel_err(gx.ravel(), fd_grad(loss_x, x.ravel().copy(), range(15))) < 1e-4


def test_adam_zero_gradient_keeps_params_and_counts():
    st_ = AdamState.zeros(4)
    p = np.arange(4.0)
    for t in range(1, 4):
        p2 = adam_step(st_, p, np.zeros(4))
        np.testing.assert_array_equal(p2, p)
        assert st_.t == t


def test_adam_constant_gradient_step_tends_to_lr():
    st_ = AdamState.zeros(3, lr=3e-4)
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    for _ in range(10_000):
        new = adam_step(st_, p, g)
        step = np.abs(new - p)
        p = new
    np.testing.assert_allclose(step, 3e-4, rtol=0.01)


def test_adam_first_step_is_lr_times_sign():
    st_ = AdamState.zeros(2, lr=0.1)
    p = adam_step(st_, np.zeros(2), np.array([3.0, -0.2]))
    np.testing.assert_allclose(p, [-0.1, 0.1], rtol=1e-6)


def test_polyak_limits_and_decay():
    rng = np.random.default_rng(0)
    t, o = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_array_equal(polyak_update(t, o, 1.0), o)
    np.testing.assert_array_equal(polyak_update(t, o, 0.0), t)
    cur = t.copy()
    for _ in range(1000):
        cur = polyak_update(cur, o, 0.005)
    ratio = np.linalg.norm(cur - o) / np.linalg.norm(t - o)
    assert ratio == pytest.approx(0.995**1000, rel=1e-9)
    with pytest.raises(ValueError):
        polyak_update(t, o, 1.5)


def test_expectile_loss_basics():
    v, d = expectile_loss(0.0, 0.7)
    assert v == 0.0 and d == 0.0
    u = np.array([-2.0, -0.5, 0.5, 3.0])
    v, d = expectile_loss(u, 0.5)
    np.testing.assert_allclose(v, 0.5 * u**2)
    np.testing.assert_allclose(d, u)
    with pytest.raises(ValueError):
        expectile_loss(u, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 0.99))
def test_expectile_derivative_matches_fd(u, tau):
    if abs(u) < 1e-3:
        return
    h = 1e-6
    fd = (expectile_loss(u + h, tau)[0] - expectile_loss(u - h, tau)[0]) / (2 * h)
    assert expectile_loss(u, tau)[1] == pytest.approx(fd, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("tau", [0.5, 0.7, 0.9])
def test_expectile_two_point_minimizer(tau):
    # first-order condition tau (1 - m) = (1 - tau) m gives m = tau
    ys = np.array([0.0, 1.0])
    m = 0.3
    for _ in range(5000):
        _, d = expectile_loss(ys - m, tau)
        m += 0.1 * d.mean()
    assert m == pytest.approx(tau, abs=1e-9)


def _probe_setup(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init((3, 32, 32, 1), rng, "softplus")
    s = rng.normal(size=2)
    a = rng.uniform(-1, 1, size=1)
    return rng, net, s, a


def test_probe_same_action_tracks_c1_delta():
    _, net, s, a = _probe_setup(0)
    g = np.linalg.norm(net.param_grad(np.r_[s, a]))
    q = float(net.forward(np.r_[s, a])[0])
    rep = generalization_probe(net, q + 1.0, s, a, a, 0.05 / g**2, target_tilde=q + 1.0)
    assert rep.distance == 0.0 and rep.c2 == 0.0
    assert abs(rep.residual) < 1e-2 * abs(rep.observed)


def test_probe_residual_is_second_order():
    for seed in range(5):
        _, net, s, a = _probe_setup(seed)
        at = a + 0.05
        g = max(np.linalg.norm(net.param_grad(np.r_[s, a])), np.linalg.norm(net.param_grad(np.r_[s, at])))
        q = float(net.forward(np.r_[s, a])[0])
        r1 = generalization_probe(net, q + 1.0, s, a, at, 0.05 / g**2)
        r2 = generalization_probe(net, q + 1.0, s, a, at, 0.025 / g**2)
        assert 3.0 <= r1.residual / r2.residual <= 5.0
        assert r1.conditions_hold and 0.0 <= r1.c1 <= 1.0


def test_probe_c1_recomputed_and_c2_identity():
    _, net, s, a = _probe_setup(3)
    at = a - 0.02
    rep = generalization_probe(net, 0.7, s, a, at, 1e-3, target_tilde=0.4)
    ga, gt = net.param_grad(np.r_[s, a]), net.param_grad(np.r_[s, at])
    assert rep.c1 == pytest.approx(1e-3 * ga @ gt, rel=1e-12)
    assert rep.c1 * (rep.delta_tilde + rep.c2 * rep.distance) == pytest.approx(rep.c1 * rep.delta_target, rel=1e-9)


def test_probe_rejects_nonfinite():
    _, net, s, a = _probe_setup(1)
    with pytest.raises(FloatingPointError):
        generalization_probe(net, np.inf, s, a, a + 0.1, 1e-3)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    nets = {"q1": Mlp.init((3, 4, 1), rng), "pi": Mlp.init((2, 4, 1), rng, out_activation="tanh")}
    save_params(tmp_path / "c.json", nets, {"step": 3})
    back, extra = load_params(tmp_path / "c.json")
    assert extra == {"step": 3}
    for k in nets:
        np.testing.assert_array_equal(back[k].params, nets[k].params)
        assert back[k].out_activation == nets[k].out_activation
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.json")
