import io

import numpy as np
import pytest

from scfde_lab import nn
from scfde_lab.numerics import Rng


def fd_gradient(loss_fn, arr, idx, step=1e-4):
    """Central difference on one coordinate of a parameter array."""
    old = arr[idx]
    h = step * max(1.0, abs(old))
    arr[idx] = old + h
    up = loss_fn()
    arr[idx] = old - h
    down = loss_fn()
    arr[idx] = old
    return (up - down) / (2.0 * h)


def check_gradients(net, x, loss_and_grad, n_probe=24, seed=0, tol=1e-4):
    """Compare analytic gradients with central differences on random params."""

    def loss_only():
        y, _ = nn.forward(net, x, train=True)
        return loss_and_grad(y)[0]

    y, cache = nn.forward(net, x, train=True)
    _, gy = loss_and_grad(y)
    grads, _ = nn.backward(net, cache, gy)
    params = list(net.trainable())
    rng = np.random.default_rng(seed)
    checked = 0
    for _ in range(n_probe):
        li, name, arr = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in arr.shape)
        ana = grads[li][name][idx]
        num = fd_gradient(loss_only, arr, idx)
        denom = max(abs(ana), abs(num), 1e-8)
        assert abs(ana - num) / denom <= tol, (li, name, idx, ana, num)
        checked += 1
    return checked


def quadratic_loss(y):
    return 0.5 * float((y**2).sum()), y


class TestForward:
    def test_identity_affine(self):
        net = nn.Network([nn.Affine(np.eye(3), np.zeros(3))])
        x = Rng(0).standard_normal((4, 3))
        y, _ = nn.forward(net, x)
        assert np.allclose(y, x)

    def test_relu(self):
        net = nn.Network([nn.Relu()])
        y, _ = nn.forward(net, np.array([[-1.0, 2.0]]))
        assert np.allclose(y, [[0.0, 2.0]])

    def test_batchnorm_normalizes_batch(self):
        net = nn.Network([nn.BatchNorm(3)])
        x = Rng(1).standard_normal((64, 3)) * np.array([2.0, 5.0, 0.3]) + 1.0
        y, _ = nn.forward(net, x, train=True)
        assert np.max(np.abs(y.mean(axis=0))) < 1e-12
        assert np.max(np.abs(y.var(axis=0) - 1.0)) < 1e-3  # eps bias only

    def test_infer_mode_is_batch_size_invariant(self):
        rng = Rng(2)
        net = nn.Network([
            nn.BatchNorm(4),
            nn.Affine.init(4, 8, rng.substream(1)), nn.Relu(),
            nn.Affine.init(8, 4, rng.substream(2)), nn.SoftmaxSplit((2, 2)),
        ])
        # drive the running stats away from the init
        nn.forward(net, rng.standard_normal((128, 4)), train=True)
        x = rng.standard_normal((6, 4))
        full, _ = nn.forward(net, x)
        for i in range(6):
            single, _ = nn.forward(net, x[i : i + 1])
            assert np.allclose(single[0], full[i])

    def test_softmax_split_heads_sum_to_one(self):
        net = nn.Network([nn.SoftmaxSplit((3, 5))])
        y, _ = nn.forward(net, Rng(3).standard_normal((7, 8)) * 20)
        assert np.allclose(y[:, :3].sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(y[:, 3:].sum(axis=1), 1.0, atol=1e-9)
        assert np.all(y >= 0)

    def test_dim_mismatch(self):
        net = nn.Network([nn.Affine.init(4, 2, Rng(4))])
        with pytest.raises(ValueError):
            nn.forward(net, np.zeros((1, 3)))


class TestBackward:
    def test_two_layer_fd_check(self):
        rng = Rng(5)
        net = nn.Network([
            nn.Affine.init(5, 7, rng.substream(1)), nn.Relu(),
            nn.Affine.init(7, 3, rng.substream(2)),
        ])
        x = rng.standard_normal((6, 5))
        check_gradients(net, x, quadratic_loss, n_probe=30)

    def test_all_layer_kinds_fd_check(self):
        rng = Rng(6)
        net = nn.Network([
            nn.BatchNorm(5),
            nn.Affine.init(5, 9, rng.substream(1)), nn.Relu(),
            nn.BatchNorm(9),
            nn.Affine.init(9, 6, rng.substream(2)), nn.Relu(),
            nn.Affine.init(6, 4, rng.substream(3)), nn.SoftmaxSplit((2, 2)),
        ])
        x = rng.standard_normal((8, 5))
        targets = np.zeros((8, 4))
        targets[np.arange(8), Rng(7).integers(0, 2, 8)] = 1.0
        targets[np.arange(8), 2 + Rng(8).integers(0, 2, 8)] = 1.0

        def ce(y):
            p = np.maximum(y, 1e-12)
            loss = float(-(targets * np.log(p)).sum()) / len(y)
            return loss, np.where(targets > 0, -targets / p, 0.0) / len(y)

        check_gradients(net, x, ce, n_probe=40)

    def test_zero_output_gradient_gives_zero_param_gradients(self):
        rng = Rng(9)
        net = nn.Network([nn.Affine.init(3, 4, rng), nn.Relu()])
        x = rng.standard_normal((5, 3))
        _, cache = nn.forward(net, x, train=True)
        grads, gx = nn.backward(net, cache, np.zeros((5, 4)))
        assert np.allclose(grads[0]["w"], 0.0)
        assert np.allclose(grads[0]["b"], 0.0)
        assert np.allclose(gx, 0.0)

    def test_bias_gradient_is_summed_output_gradient(self):
        rng = Rng(10)
        net = nn.Network([nn.Affine.init(3, 4, rng)])
        x = rng.standard_normal((6, 3))
        _, cache = nn.forward(net, x, train=True)
        gy = rng.standard_normal((6, 4))
        grads, _ = nn.backward(net, cache, gy)
        assert np.allclose(grads[0]["b"], gy.sum(axis=0))

    def test_input_gradient_fd(self):
        rng = Rng(11)
        net = nn.Network([
            nn.BatchNorm(4), nn.Affine.init(4, 6, rng), nn.Relu(),
            nn.Affine.init(6, 2, rng.substream(1)),
        ])
        x = rng.standard_normal((5, 4))
        _, cache = nn.forward(net, x, train=True)
        y, _ = nn.forward(net, x, train=True)
        loss, gy = quadratic_loss(y)
        _, gx = nn.backward(net, cache, gy)

        def loss_of_x():
            yy, _ = nn.forward(net, x, train=True)
            return quadratic_loss(yy)[0]

        for idx in [(0, 0), (2, 3), (4, 1)]:
            num = fd_gradient(loss_of_x, x, idx)
            assert abs(gx[idx] - num) / max(abs(num), 1e-8) < 1e-4


class TestLossSpec:
    def test_weights_q2_linear(self):
        assert np.allclose(nn.LossSpec(2, 1).weights(), [1.0, 2.0])

    def test_weights_q3_linear(self):
        assert np.allclose(nn.LossSpec(3, 1).weights(), [1 / 3, 2 / 3, 1.0])

    def test_weights_q7_quartic(self):
        w = nn.LossSpec(7, 4).weights()
        denom = sum(q**4 for q in range(1, 7))
        assert denom == 2275
        assert np.allclose(w, [(q + 1) ** 4 / denom for q in range(7)])

    def test_single_stage_degenerates_to_one(self):
        assert np.allclose(nn.LossSpec(1, 1).weights(), [1.0])


class TestWeightedCeLoss:
    def test_perfect_predictions_zero_loss(self):
        targets = np.zeros((2, 3, 2, 2))
        targets[..., 0] = 1.0
        loss, grads = nn.weighted_ce_loss([targets.copy()], targets, nn.LossSpec(1))
        assert abs(loss) < 1e-12
        assert len(grads) == 1

    def test_uniform_qpsk_closed_form(self):
        # every component term is ln2 / 2; per (stage, symbol) the pair sums
        # to w_q * ln2, so the total is ln2 * sum(w) / Q
        b, k = 3, 5
        targets = np.zeros((b, k, 2, 2))
        targets[..., 1] = 1.0
        uniform = np.full((b, k, 2, 2), 0.5)
        spec = nn.LossSpec(2, 1)
        loss, _ = nn.weighted_ce_loss([uniform, uniform], targets, spec)
        assert abs(loss - np.log(2.0) * (1.0 + 2.0) / 2.0) < 1e-12

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        b, k, lv = 2, 3, 4
        targets = np.zeros((b, k, 2, lv))
        for bi in range(b):
            for ki in range(k):
                targets[bi, ki, 0, rng.integers(lv)] = 1.0
                targets[bi, ki, 1, rng.integers(lv)] = 1.0
        p = rng.random((b, k, 2, lv)) + 0.1
        p /= p.sum(axis=-1, keepdims=True)
        spec = nn.LossSpec(1)
        _, grads = nn.weighted_ce_loss([p], targets, spec)
        for idx in [(0, 0, 0, 1), (1, 2, 1, 3), (0, 1, 1, 0)]:
            def f():
                return nn.weighted_ce_loss([p], targets, spec)[0]
            num = fd_gradient(f, p, idx, step=1e-6)
            assert abs(grads[0][idx] - num) / max(abs(num), 1e-8) < 1e-5

    def test_clamp_counter(self):
        nn.reset_ce_clamp_count()
        targets = np.zeros((1, 1, 2, 2))
        targets[..., 0] = 1.0
        p = np.zeros((1, 1, 2, 2))
        p[..., 1] = 1.0  # zero probability at the target index
        loss, _ = nn.weighted_ce_loss([p], targets, nn.LossSpec(1))
        assert np.isfinite(loss)
        assert nn.ce_clamp_count() == 2
        nn.reset_ce_clamp_count()

    def test_permutation_invariance_over_symbols(self):
        rng = np.random.default_rng(13)
        targets = np.zeros((1, 4, 2, 2))
        targets[..., 0] = 1.0
        p = rng.random((1, 4, 2, 2)) + 0.1
        p /= p.sum(axis=-1, keepdims=True)
        spec = nn.LossSpec(1)
        loss_a, _ = nn.weighted_ce_loss([p], targets, spec)
        perm = rng.permutation(4)
        loss_b, _ = nn.weighted_ce_loss([p[:, perm]], targets[:, perm], spec)
        assert abs(loss_a - loss_b) < 1e-14


class TestAdam:
    def test_zero_gradient_no_change(self):
        net = nn.Network([nn.Affine.init(3, 3, Rng(14))])
        w0 = net.layers[0].w.copy()
        grads = nn.zero_grads(net)
        nn.adam_step(net, grads, nn.AdamState(), 0.1)
        assert np.array_equal(net.layers[0].w, w0)

    def test_first_step_magnitude_is_learning_rate(self):
        net = nn.Network([nn.Affine(np.ones((2, 2)), np.zeros(2))])
        grads = [{"w": np.full((2, 2), 3.0), "b": np.zeros(2)}]
        w0 = net.layers[0].w.copy()
        nn.adam_step(net, grads, nn.AdamState(), 0.01)
        step = w0 - net.layers[0].w
        # bias-corrected first step: lr * g / (|g| + eps) ~ lr
        assert np.allclose(step, 0.01, rtol=1e-6)

    def test_constant_gradient_moves_against_it(self):
        net = nn.Network([nn.Affine(np.zeros((1, 1)), np.zeros(1))])
        state = nn.AdamState()
        for _ in range(50):
            nn.adam_step(net, [{"w": np.array([[2.0]]), "b": np.zeros(1)}],
                         state, 0.01)
        assert net.layers[0].w[0, 0] < -0.1


class TestSerialization:
    def test_roundtrip_bytes_and_values(self):
        rng = Rng(15)
        net = nn.Network([
            nn.BatchNorm(5),
            nn.Affine.init(5, 7, rng), nn.Relu(),
            nn.Affine.init(7, 4, rng.substream(1)), nn.SoftmaxSplit((2, 2)),
        ])
        nn.forward(net, rng.standard_normal((32, 5)), train=True)
        buf = io.BytesIO()
        nn.save_network(net, buf)
        buf.seek(0)
        loaded = nn.load_network(buf)
        assert nn.network_equal(net, loaded)
        buf2 = io.BytesIO()
        nn.save_network(loaded, buf2)
        assert buf.getvalue() == buf2.getvalue()
        x = rng.standard_normal((3, 5))
        assert np.allclose(nn.forward(net, x)[0], nn.forward(loaded, x)[0])

    def test_truncated_checkpoint_rejected(self):
        net = nn.Network([nn.Affine.init(2, 2, Rng(16))])
        buf = io.BytesIO()
        nn.save_network(net, buf)
        data = buf.getvalue()[:-8]
        with pytest.raises(ValueError):
            nn.load_network(io.BytesIO(data))
