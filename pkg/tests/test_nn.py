import numpy as np
import pytest

from urllc_la.nn import Adam, Mlp, adam_step, backward, forward


def numeric_param_grads(net, x, g_out, h=1e-5):
    """Central differences of ``sum(g_out * net(x))`` w.r.t. every parameter."""
    out = []
    for p in net.params:
        gp = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = np.sum(g_out * net.forward(x))
            p[i] = old - h
            down = np.sum(g_out * net.forward(x))
            p[i] = old
            gp[i] = (up - down) / (2 * h)
        out.append(gp)
    return out


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def random_architectures(n=20, seed=0):
    rng = np.random.default_rng(seed)
    archs = [([7, 128, 128, 128, 3], "identity")]
    while len(archs) < n:
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 9))] + [int(rng.integers(3, 17)) for _ in range(depth)]
        sizes.append(int(rng.integers(1, 5)))
        archs.append((sizes, str(rng.choice(["identity", "tanh"]))))
    return archs


def check_gradients(sizes, act, seed):
    rng = np.random.default_rng(seed)
    net = Mlp(sizes, act, rng=rng)
    for b in net.biases:
        b += 0.1 * rng.standard_normal(b.shape)  # keep ReLUs away from their kink
    x = rng.standard_normal((3, sizes[0]))
    g_out = rng.standard_normal((3, sizes[-1]))
    y, cache = net.forward(x, return_cache=True)
    grads, gx = net.backward(cache, g_out)
    num = numeric_param_grads(net, x, g_out)
    worst = max(rel_error(a, b) for a, b in zip(grads, num))
    # input gradient, one coordinate at a time
    gx_num = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-5
        xm[idx] -= 1e-5
        gx_num[idx] = (np.sum(g_out * net.forward(xp)) - np.sum(g_out * net.forward(xm))) / 2e-5
    return max(worst, rel_error(gx, gx_num))


@pytest.mark.parametrize("sizes, act", random_architectures()[1:])
def test_backprop_matches_finite_differences(sizes, act):
    assert check_gradients(sizes, act, seed=len(sizes) + sizes[0]) < 1e-4


def test_backprop_default_width():
    # only spot-check the big default architecture on a subset of weights
    rng = np.random.default_rng(1)
    net = Mlp([7, 128, 128, 128, 3], rng=rng)
    x = rng.standard_normal((2, 7))
    g_out = rng.standard_normal((2, 3))
    _, cache = net.forward(x, return_cache=True)
    grads, _ = net.backward(cache, g_out)
    for layer in (0, 4, 6):
        p = net.params[layer]
        for _ in range(10):
            i = tuple(rng.integers(0, s) for s in p.shape)
            old = p[i]
            p[i] = old + 1e-5
            up = np.sum(g_out * net.forward(x))
            p[i] = old - 1e-5
            down = np.sum(g_out * net.forward(x))
            p[i] = old
            num = (up - down) / 2e-5
            assert abs(num - grads[layer][i]) <= 1e-4 * max(abs(num), 1e-6) + 1e-9


def test_shapes_and_single_sample():
    net = Mlp([4, 8, 2], rng=np.random.default_rng(0))
    assert net.forward(np.zeros(4)).shape == (2,)
    assert net.forward(np.zeros((5, 4))).shape == (5, 2)
    with pytest.raises(ValueError):
        net.forward(np.zeros(3))


def test_tanh_output_bounded():
    net = Mlp([3, 16, 2], "tanh", rng=np.random.default_rng(0))
    y = net.forward(100 * np.random.default_rng(1).standard_normal((50, 3)))
    assert np.all(np.abs(y) <= 1.0)


def test_invalid_construction():
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 2], "sigmoid")


def test_adam_quadratic_bowl():
    rng = np.random.default_rng(0)
    net = Mlp([1, 1])  # y = w x + b; minimise (w-3)^2 + (b+1)^2 via a fake gradient
    opt = Adam(net, lr=0.05)
    for step in range(5000):
        w, b = net.weights[0][0, 0], net.biases[0][0]
        if (w - 3) ** 2 + (b + 1) ** 2 < 1e-6:
            break
        opt.step(net, [np.array([[2 * (w - 3)]]), np.array([2 * (b + 1)])])
    assert (net.weights[0][0, 0] - 3) ** 2 + (net.biases[0][0] + 1) ** 2 < 1e-6
    assert step < 5000


def test_regression_fit():
    rng = np.random.default_rng(0)
    net = Mlp([1, 32, 32, 1], rng=rng)
    opt = Adam(net, lr=3e-3)
    x = np.linspace(-1, 1, 64)[:, None]
    y = np.sin(3 * x)
    for _ in range(3000):
        pred = forward(net, x)
        grads = backward(net, x, 2 * (pred - y) / len(x))
        adam_step(net, grads, opt)
    assert np.mean((net.forward(x) - y) ** 2) < 1e-2


def test_soft_update_and_copy():
    a = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    b = a.copy()
    for p in b.params:
        p += 1.0
    a.soft_update(b, 0.25)
    c = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    for pa, pc in zip(a.params, c.params):
        np.testing.assert_allclose(pa, pc + 0.25)
    with pytest.raises(ValueError):
        a.soft_update(b, 0.0)


def test_state_round_trip():
    a = Mlp([3, 5, 2], "tanh", rng=np.random.default_rng(4))
    b = Mlp.from_state(a.get_state())
    x = np.random.default_rng(5).standard_normal((4, 3))
    np.testing.assert_array_equal(a.forward(x), b.forward(x))
    assert b.output_activation == "tanh"
