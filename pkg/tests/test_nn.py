import json
import math

import numpy as np
import pytest

from obscbf.nn import ACTIVATIONS, Adam, Mlp, activate, softplus


def straight_line_forward(net, x):
    """Independent re-evaluation, one sample and one neuron at a time."""
    a = [float(v) for v in x]
    n_layers = len(net.weights)
    for k in range(n_layers):
        W, b = net.weights[k], net.biases[k]
        z = [sum(W[i, j] * a[j] for j in range(len(a))) + b[i] for i in range(W.shape[0])]
        if k < n_layers - 1:
            if net.activation == "softplus":
                z = [math.log1p(math.exp(v)) if v < 30 else v + math.log1p(math.exp(-v)) for v in z]
            else:
                z = [math.tanh(v) for v in z]
        a = z
    if net.clamped:
        a = [min(max(v, lo), hi) for v, lo, hi in zip(a, net.lb, net.ub)]
    return np.array(a)


def random_net(rng, out=None, clamp=False, act=None):
    depth = int(rng.integers(2, 5))
    dims = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
    if out is not None:
        dims[-1] = out
    act = act or ACTIVATIONS[int(rng.integers(0, 2))]
    lb = ub = None
    if clamp:
        lb = -rng.uniform(0.1, 1.0, dims[-1])
        ub = rng.uniform(0.1, 1.0, dims[-1])
    return Mlp.init(dims, act, lb, ub, rng=rng)


def test_softplus_zero():
    # one softplus unit with an identity readout
    net = Mlp([1, 1, 1], [[[1.0]], [[1.0]]], [[0.0], [0.0]])
    assert net.forward([0.0])[0] == pytest.approx(math.log(2.0), abs=1e-15)


def test_softplus_stable_for_large_inputs():
    z = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
    out = softplus(z)
    assert np.all(np.isfinite(out))
    assert out[-1] == 800.0 and out[0] == 0.0


def test_clamp_example():
    net = Mlp([1, 1], [[[1.0]]], [[0.0]], lb=[-1.0], ub=[1.0])
    assert net.forward([2.0])[0] == 1.0


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        net = random_net(rng, clamp=bool(rng.integers(0, 2)))
        x = rng.normal(size=net.in_dim)
        got, want = net.forward(x), straight_line_forward(net, x)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-14)


def test_forward_batch_and_single_agree():
    rng = np.random.default_rng(4)
    net = random_net(rng)
    X = rng.normal(size=(7, net.in_dim))
    batch = net.forward(X)
    # BLAS may pick a different kernel for one row, so allow the last ulp
    for i in range(7):
        assert np.allclose(batch[i], net.forward(X[i]), rtol=1e-14, atol=1e-16)


def test_dimension_mismatch_rejected():
    net = Mlp.init([3, 4, 1], rng=0)
    with pytest.raises(ValueError, match="shape"):
        net.forward(np.zeros(2))


def test_constructor_validates_shapes():
    with pytest.raises(ValueError):
        Mlp([2, 1], [np.zeros((2, 1))], [np.zeros(1)])
    with pytest.raises(ValueError):
        Mlp([1, 1], [np.ones((1, 1))], [np.zeros(1)], lb=[1.0], ub=[0.0])
    with pytest.raises(ValueError):
        Mlp([1, 1], [np.ones((1, 1))], [np.zeros(1)], activation="relu")


def test_linear_input_gradient():
    net = Mlp([2, 1], [[[3.0, -2.0]]], [[0.5]])
    for x in ([0.0, 0.0], [1.0, -4.0]):
        assert np.array_equal(net.input_gradient(x), [3.0, -2.0])


def test_single_softplus_neuron_gradient():
    net = Mlp([1, 1, 1], [[[1.0]], [[1.0]]], [[0.0], [0.0]])
    assert net.input_gradient([0.0])[0] == pytest.approx(0.5, abs=1e-15)


def test_input_gradient_rejects_multi_output_or_clamped():
    with pytest.raises(ValueError):
        Mlp.init([2, 3, 2], rng=0).input_gradient([0.0, 0.0])
    with pytest.raises(ValueError):
        Mlp.init([2, 3, 1], lb=[-1.0], ub=[1.0], rng=0).input_gradient([0.0, 0.0])


def fd_input_grad(net, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (net.forward(x + e)[0] - net.forward(x - e)[0]) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(30):
        net = random_net(rng, out=1)
        x = rng.normal(size=net.in_dim)
        assert rel_err(net.input_gradient(x), fd_input_grad(net, x)) <= 1e-6


def test_param_gradients_zero_upstream():
    rng = np.random.default_rng(6)
    net = random_net(rng)
    grads = net.param_gradients(np.zeros(net.out_dim), rng.normal(size=net.in_dim))
    assert all(not np.any(g) for g in grads)


def test_param_gradients_linear_net():
    net = Mlp([1, 1], [[[2.0]]], [[1.0]])
    gW, gb = net.param_gradients([1.0], [0.7])
    assert gW[0, 0] == 0.7 and gb[0] == 1.0


def test_param_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-5
    for _ in range(20):
        net = random_net(rng, clamp=bool(rng.integers(0, 2)))
        x = rng.normal(size=net.in_dim)
        up = rng.normal(size=net.out_dim)
        grads = net.param_gradients(up, x)
        for p, g in zip(net.params, grads):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                fp = up @ net.forward(x)
                p[idx] = old - h
                fm = up @ net.forward(x)
                p[idx] = old
                fd[idx] = (fp - fm) / (2 * h)
            assert np.max(np.abs(g - fd)) <= 1e-5 * max(np.max(np.abs(fd)), 1e-3)


def test_clamp_blocks_gradient_when_saturated():
    net = Mlp([1, 1], [[[1.0]]], [[0.0]], lb=[-1.0], ub=[1.0])
    gW, gb = net.param_gradients([1.0], [3.0])
    assert gW[0, 0] == 0.0 and gb[0] == 0.0
    # boundary belongs to the pass-through region
    gW, gb = net.param_gradients([1.0], [1.0])
    assert gb[0] == 1.0


def test_clamp_bounds_hold_on_many_inputs():
    rng = np.random.default_rng(8)
    net = Mlp.init([3, 16, 16, 2], lb=[-0.5, 0.0], ub=[0.5, 1e-4], rng=rng)
    net.weights[-1] *= 50.0
    y = net.forward(rng.normal(scale=10.0, size=(100_000, 3)))
    assert np.all(y >= net.lb) and np.all(y <= net.ub)


def test_activation_slopes_at_most_one():
    z = np.linspace(-50, 50, 200_001)
    for act in ACTIVATIONS:
        _, d1, d2 = activate(act, z, order=2)
        assert np.max(np.abs(d1)) <= 1.0
        assert np.all(d1 >= 0.0)
    # second-derivative extremes used by the Lipschitz module
    _, _, d2 = activate("softplus", z, order=2)
    assert np.max(np.abs(d2)) == pytest.approx(0.25, rel=1e-9)
    _, _, d2 = activate("tanh", z, order=2)
    assert np.max(np.abs(d2)) == pytest.approx(4 / (3 * math.sqrt(3)), rel=1e-6)


def test_forward_deterministic():
    rng = np.random.default_rng(9)
    net = random_net(rng)
    x = rng.normal(size=(50, net.in_dim))
    assert np.array_equal(net.forward(x), net.forward(x.copy()))


def test_jvp_matches_gradient_dot_direction():
    rng = np.random.default_rng(10)
    for _ in range(10):
        net = random_net(rng, out=1)
        x = rng.normal(size=(5, net.in_dim))
        v = rng.normal(size=(5, net.in_dim))
        y, ydot, _ = net.jvp(x, v)
        assert np.allclose(y, net.forward(x)[:, 0])
        assert np.allclose(ydot, np.sum(net.input_gradient(x) * v, axis=1), rtol=1e-12, atol=1e-14)


def test_jvp_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    net = Mlp.init([3, 5, 4, 1], "tanh", rng=rng)
    x = rng.normal(size=(4, 3))
    v = rng.normal(size=(4, 3))
    ybar = rng.normal(size=4)
    tbar = rng.normal(size=4)

    def obj():
        y, t, _ = net.jvp(x, v)
        return float(np.sum(ybar * y) + np.sum(tbar * t))

    _, _, cache = net.jvp(x, v)
    grads, vbar = net.jvp_backward(cache, ybar, tbar)
    for p, g in zip(net.params, grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            fp = obj()
            p[idx] = old - h
            fm = obj()
            p[idx] = old
            assert g[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-8)
    # vbar is the gradient of the objective with respect to v
    for i in range(3):
        old = v[0, i]
        v[0, i] = old + h
        fp = obj()
        v[0, i] = old - h
        fm = obj()
        v[0, i] = old
        assert vbar[0, i] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-8)


def test_serialization_round_trip_is_exact():
    rng = np.random.default_rng(12)
    net = Mlp.init([4, 7, 3, 2], "tanh", lb=[-1.0, 0.0], ub=[1.0, 1e-4], rng=rng)
    back = Mlp.from_json(net.to_json())
    for a, b in zip(net.params, back.params):
        assert np.array_equal(a, b)
    assert back.activation == "tanh" and np.array_equal(back.lb, net.lb)
    doc = json.loads(net.to_json())
    assert doc["output_transform"] == "hardtanh"
    assert doc["layer_dims"] == [4, 7, 3, 2]


def test_from_dict_rejects_unknown_transform():
    d = Mlp.init([1, 1], rng=0).to_dict()
    d["output_transform"] = "sigmoid"
    with pytest.raises(ValueError):
        Mlp.from_dict(d)


def test_init_input_scale():
    a = Mlp.init([2, 3, 1], rng=0)
    b = Mlp.init([2, 3, 1], rng=0, input_scale=[0.5, 2.0])
    assert np.allclose(b.weights[0], a.weights[0] / [0.5, 2.0])
    with pytest.raises(ValueError):
        Mlp.init([2, 3, 1], rng=0, input_scale=[1.0])


# -- Adam ------------------------------------------------------------------


def test_adam_zero_gradient():
    p = [np.array([1.0, 2.0])]
    opt = Adam(lr=0.1)
    opt.step(p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, 2.0]) and opt.step_count == 1


def test_adam_first_step_has_learning_rate_size():
    for g in (1e-3, 0.5, -7.0):
        p = [np.array([0.0])]
        Adam(lr=0.01).step(p, [np.array([g])])
        assert p[0][0] == pytest.approx(-0.01 * np.sign(g), rel=1e-4)


def test_adam_quadratic():
    theta = [np.array([0.0])]
    opt = Adam(lr=0.1)
    for _ in range(200):
        opt.step(theta, [2.0 * (theta[0] - 3.0)])
    assert abs(theta[0][0] - 3.0) <= 1e-2


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError):
        Adam().step([np.zeros(1)], [np.array([np.nan])])


def test_adam_state_round_trip():
    rng = np.random.default_rng(13)
    p = [rng.normal(size=(2, 2))]
    opt = Adam(lr=0.05)
    for _ in range(3):
        opt.step(p, [rng.normal(size=(2, 2))])
    back = Adam.from_state_dict(json.loads(json.dumps(opt.state_dict())))
    q = [p[0].copy()]
    g = rng.normal(size=(2, 2))
    opt.step(p, [g])
    back.step(q, [g])
    assert np.array_equal(p[0], q[0]) and back.step_count == 4
