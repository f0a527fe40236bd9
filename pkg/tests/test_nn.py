import numpy as np
import pytest

from garmentforge.nn import Adam, DenseNet, NetworkError, gradcheck, load_net, save_net


def loop_forward(net, x):
    out = []
    for row in x:
        h = list(row)
        for w, b, act in zip(net.weights, net.biases, net.activations):
            nxt = []
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += h[i] * w[i, j]
                nxt.append(max(s, 0.0) if act == "relu" else s)
            h = nxt
        out.append(h)
    return np.array(out)


class TestForward:
    def test_zero_net(self, rng):
        net = DenseNet([4, 5, 3], init="zero")
        assert np.array_equal(net(rng.normal(size=(2, 4))), np.zeros((2, 3)))

    def test_identity_layer(self, rng):
        net = DenseNet([4, 4], init="zero")
        net.weights[0][:] = np.eye(4)
        x = rng.normal(size=(3, 4))
        assert np.array_equal(net(x), x)

    def test_loop_oracle(self, rng):
        net = DenseNet([5, 7, 3], rng=rng)
        net.biases[0][:] = rng.normal(size=7)
        x = rng.normal(size=(4, 5))
        assert np.abs(net(x) - loop_forward(net, x)).max() < 1e-9

    def test_non_finite_input(self):
        with pytest.raises(NetworkError):
            DenseNet([2, 2])(np.array([[np.nan, 0.0]]))

    def test_width_mismatch(self):
        with pytest.raises(NetworkError):
            DenseNet([2, 2])(np.zeros((1, 3)))


class TestBackward:
    def test_linear_sum(self, rng):
        net = DenseNet([3, 2], rng=rng)
        x = rng.normal(size=(1, 3))
        y, cache = net.forward(x)
        grads, gx = net.backward(cache, np.ones_like(y))
        assert np.allclose(grads[0], np.outer(x[0], np.ones(2)))
        assert np.allclose(grads[1], np.ones(2))
        assert np.allclose(gx, net.weights[0].sum(1)[None])

    def test_relu_blocks_negative_units(self):
        net = DenseNet([1, 2, 1], init="zero")
        net.weights[0][:] = [[1.0, -1.0]]
        net.weights[1][:] = [[1.0], [1.0]]
        y, cache = net.forward(np.array([[2.0]]))
        grads, _ = net.backward(cache, np.ones_like(y))
        assert grads[0][0, 1] == 0.0 and grads[0][0, 0] == 2.0

    def test_finite_differences(self, rng):
        net = DenseNet([6, 8, 7, 3], rng=rng)
        for b in net.biases:
            b += 0.1 * rng.normal(size=b.shape)
        x = rng.normal(size=(5, 6))
        t = rng.normal(size=(5, 3))

        def fn(p):
            for k in range(3):
                net.weights[k], net.biases[k] = p[f"W{k}"], p[f"b{k}"]
            y, cache = net.forward(x)
            g, _ = net.backward(cache, 2 * (y - t))
            return float(((y - t) ** 2).sum()), dict(zip(net.param_names(), g))

        report = gradcheck(fn, dict(zip(net.param_names(), [p.copy() for p in net.params()])), h=1e-5,
                           max_probes=10_000)
        assert report.max_rel < 1e-4

    def test_input_gradient(self, rng):
        net = DenseNet([4, 6, 2], rng=rng)
        x = rng.normal(size=(1, 4))
        y, cache = net.forward(x)
        _, gx = net.backward(cache, np.ones_like(y))
        h = 1e-6
        for i in range(4):
            e = np.zeros_like(x)
            e[0, i] = h
            fd = (net(x + e).sum() - net(x - e).sum()) / (2 * h)
            assert abs(fd - gx[0, i]) < 1e-6

    def test_hidden_gradient_injection(self, rng):
        net = DenseNet([3, 4, 2], rng=rng)
        x = rng.normal(size=(2, 3))
        extra = rng.normal(size=(2, 4))
        y, cache = net.forward(x)
        grads, _ = net.backward(cache, np.ones_like(y), hidden_grads={0: extra})
        # objective: sum(y) + <extra, hidden0>
        h = 1e-6
        w = net.weights[0]
        for (i, j) in [(0, 0), (2, 3)]:
            old = w[i, j]
            w[i, j] = old + h
            yp, cp = net.forward(x)
            fp = yp.sum() + (extra * net.hidden(cp, 0)).sum()
            w[i, j] = old - h
            ym, cm = net.forward(x)
            fm = ym.sum() + (extra * net.hidden(cm, 0)).sum()
            w[i, j] = old
            assert abs((fp - fm) / (2 * h) - grads[0][i, j]) < 1e-6

    def test_missing_cache(self):
        with pytest.raises(NetworkError):
            DenseNet([2, 2]).backward(None, np.zeros((1, 2)))


def reference_adam(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0.copy(), np.zeros_like(x0), np.zeros_like(x0)
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        traj.append(x.copy())
    return traj


class TestAdam:
    def test_zero_gradient(self):
        p = [np.ones(3)]
        Adam(p, lr=0.1).step(p, [np.zeros(3)])
        assert np.array_equal(p[0], np.ones(3))

    def test_constant_gradient_direction(self):
        p = [np.zeros(2)]
        opt = Adam(p, lr=0.01)
        for _ in range(50):
            opt.step(p, [np.array([1.0, -2.0])])
        assert p[0][0] < 0 < p[0][1]

    def test_quadratic_matches_recurrence(self):
        a = np.array([1.0, 3.0, 0.5])
        x0 = np.array([1.0, -2.0, 0.7])
        p = [x0.copy()]
        opt = Adam(p, lr=0.05)
        losses = [0.5 * np.sum(a * x0 ** 2)]
        ours = []
        for _ in range(10):
            opt.step(p, [a * p[0]])
            ours.append(p[0].copy())
            losses.append(0.5 * np.sum(a * p[0] ** 2))
        ref = reference_adam(x0, lambda x: a * x, 10, 0.05)
        assert max(np.abs(o - r).max() for o, r in zip(ours, ref)) < 1e-9
        assert all(l1 < l0 for l0, l1 in zip(losses, losses[1:]))

    def test_refuses_non_finite(self):
        p = [np.ones(2)]
        opt = Adam(p)
        with pytest.raises(NetworkError):
            opt.step(p, [np.array([np.inf, 0.0])])
        assert np.array_equal(p[0], np.ones(2)) and opt.t == 0


class TestGradcheck:
    def test_quadratic(self, rng):
        a = rng.normal(size=(4, 4))
        q = a @ a.T + np.eye(4)

        def fn(p):
            x = p["x"]
            return float(0.5 * x @ q @ x), {"x": q @ x}
        assert gradcheck(fn, {"x": rng.normal(size=4)}, h=1e-5).max_rel < 1e-8

    def test_detects_wrong_gradient(self, rng):
        report = gradcheck(lambda p: (float((p["x"] ** 2).sum()), {"x": 3 * p["x"]}), {"x": rng.normal(size=3)})
        assert report.max_rel > 0.1


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = DenseNet([3, 4, 2], rng=rng, dtype=np.float32)
        info = save_net(net, tmp_path, "net")
        back = load_net(tmp_path, "net", info)
        x = rng.normal(size=(2, 3))
        assert np.array_equal(back(x), net(x))
