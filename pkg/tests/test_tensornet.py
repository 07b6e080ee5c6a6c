import numpy as np
import pytest

from oaknee import tensornet as tn
from oaknee.errors import BatchTooSmall, ShapeError


def rng(seed=0):
    return np.random.default_rng(seed)


# conv2d


def test_conv_delta_kernel_identity():
    x = rng().normal(size=(2, 7, 5, 1))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1
    out, _ = tn.conv2d_forward(x, w, np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_matches_direct_sum():
    r = rng(1)
    x, w, b = r.normal(size=(2, 5, 6, 3)), r.normal(size=(3, 3, 3, 4)), r.normal(size=4)
    out, _ = tn.conv2d_forward(x, w, b)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 6, 4))
    for i in range(5):
        for j in range(6):
            ref[:, i, j] = np.einsum("nabc,abcd->nd", xp[:, i:i + 3, j:j + 3], w) + b
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_table_shape():
    layer = tn.Conv2d(1, 32, rng())
    out = layer.forward(np.zeros((64, 48, 48, 1), dtype=np.float32))
    assert out.shape == (64, 48, 48, 32)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        tn.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        tn.conv2d_forward(np.zeros((1, 4, 4, 1)), np.zeros((5, 5, 1, 1)), np.zeros(1))


@pytest.mark.parametrize("seed", range(3))
def test_conv_grad_check(seed):
    layer = tn.Conv2d(3, 4, rng(seed), np.float64)
    assert tn.grad_check(layer, (2, 5, 5, 3), 1e-5, seed=seed).passed


# batchnorm


def test_bn_train_normalizes():
    layer = tn.BatchNorm2d(3, np.float64)
    x = rng(2).normal(3.0, 5.0, size=(8, 4, 4, 3))
    out = layer.forward(x, train=True).reshape(-1, 3)
    assert np.all(np.abs(out.mean(0)) < 1e-6) and np.all(np.abs(out.var(0) - 1) < 1e-5)


def test_bn_constant_channel_gives_beta():
    layer = tn.BatchNorm2d(2, np.float64)
    layer.params["beta"][:] = [0.7, -1.5]
    out = layer.forward(np.full((4, 3, 3, 2), 9.0), train=True)
    assert np.allclose(out[..., 0], 0.7) and np.allclose(out[..., 1], -1.5)


def test_bn_batch_of_one():
    with pytest.raises(BatchTooSmall):
        tn.BatchNorm2d(2).forward(np.zeros((1, 2, 2, 2), dtype=np.float32), train=True)


def test_bn_running_stats_and_eval_affine():
    layer = tn.BatchNorm2d(1, np.float64)
    x = rng(3).normal(2.0, 3.0, size=(5, 2, 2, 1))
    layer.forward(x, train=True)
    m = x.size
    assert layer.buffers["running_mean"][0] == pytest.approx(0.1 * x.mean())
    assert layer.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var() * m / (m - 1))
    a = layer.forward(np.zeros((1, 1, 1, 1)))
    b = layer.forward(np.ones((1, 1, 1, 1)))
    c = layer.forward(np.full((1, 1, 1, 1), 2.0))
    assert (c - b)[0, 0, 0, 0] == pytest.approx((b - a)[0, 0, 0, 0])


@pytest.mark.parametrize("seed", range(3))
def test_bn_grad_check(seed):
    assert tn.grad_check(tn.BatchNorm2d(3, np.float64), (4, 4, 4, 3), 1e-4, seed=seed).passed


# maxpool


def test_maxpool_small():
    out, _ = tn.maxpool2x2_forward(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert out.item() == 4.0


def test_maxpool_chain_shapes():
    x = np.zeros((1, 48, 48, 1))
    for size in (24, 12, 6):
        x, _ = tn.maxpool2x2_forward(x)
        assert x.shape == (1, size, size, 1)


def test_maxpool_tie_goes_to_first():
    layer = tn.MaxPool2x2()
    layer.forward(np.ones((1, 2, 2, 1)))
    dx = layer.backward(np.ones((1, 1, 1, 1)))
    assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError):
        tn.maxpool2x2_forward(np.zeros((1, 3, 4, 1)))


def test_relu_commutes_with_pool():
    x = rng(4).normal(size=(3, 8, 8, 5))
    a, _ = tn.maxpool2x2_forward(np.maximum(x, 0))
    b, _ = tn.maxpool2x2_forward(x)
    assert np.array_equal(a, np.maximum(b, 0))


# linear


def test_linear_identity_and_zero():
    x = rng(5).normal(size=(3, 4))
    assert np.array_equal(tn.linear_forward(x, np.eye(4), np.zeros(4)), x)
    b = np.arange(2.0)
    assert np.array_equal(tn.linear_forward(x, np.zeros((4, 2)), b), np.tile(b, (3, 1)))
    with pytest.raises(ShapeError):
        tn.linear_forward(x, np.zeros((5, 2)), b)


def test_linear_grad_check():
    assert tn.grad_check(tn.Linear(7, 4, rng(), np.float64), (3, 7), 1e-6).passed


# dropout


def test_dropout_identity_cases():
    x = rng(6).normal(size=(4, 5))
    assert np.array_equal(tn.Dropout(0.0).forward(x, train=True), x)
    assert np.array_equal(tn.Dropout(0.7).forward(x, train=False), x)


def test_dropout_statistics():
    out = tn.Dropout(0.5, rng(7)).forward(np.ones(100000), train=True)
    kept = out[out != 0]
    assert abs(len(kept) / out.size - 0.5) < 0.01
    assert abs(kept.mean() - 2.0) < 0.05


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        tn.Dropout(1.0)


# softmax cross entropy


def test_ce_equal_logits():
    loss, _ = tn.softmax_cross_entropy(np.zeros((4, 2)), [0, 1, 1, 0])
    assert loss == pytest.approx(np.log(2))


def test_ce_saturated():
    loss, _ = tn.softmax_cross_entropy(np.array([[30.0, 0.0], [0.0, 30.0]]), [0, 1])
    assert loss < 1e-9


def test_ce_gradient_finite_difference():
    z = rng(8).normal(size=(5, 2))
    y = np.array([0, 1, 1, 0, 1])
    _, g = tn.softmax_cross_entropy(z, y)
    num = tn.numeric_grad(lambda: tn.softmax_cross_entropy(z, y)[0], z)
    assert tn.relative_error(g.ravel(), num).max() < 1e-6


# optimizer


def test_sgd_plain_step():
    p = {"w": np.array([1.0, 2.0])}
    tn.sgd_momentum_step(p, {"w": np.array([0.5, -1.0])}, tn.SgdState(0.1, momentum=0.0))
    assert np.allclose(p["w"], [0.95, 2.1])


def test_sgd_momentum_hand_arithmetic():
    p = {"w": np.zeros(1)}
    state = tn.SgdState(0.1, momentum=0.9)
    tn.sgd_momentum_step(p, {"w": np.ones(1)}, state)
    assert p["w"][0] == pytest.approx(-0.1)
    tn.sgd_momentum_step(p, {"w": np.ones(1)}, state)
    assert p["w"][0] == pytest.approx(-0.29)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        tn.sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, tn.SgdState(0.1))


def test_step_lr_schedule():
    assert [tn.step_lr(e) for e in (0, 7, 8, 16)] == pytest.approx([0.01, 0.01, 0.001, 0.0001])


# gradient checker


def test_grad_check_detects_wrong_backward():
    class Broken(tn.Linear):
        def backward(self, dout):
            dx = super().backward(dout)
            self.grads["weight"] = self.grads["weight"] * 1.001
            return dx

    report = tn.grad_check(Broken(4, 3, rng(), np.float64), (2, 4), 1e-6)
    assert not report.passed and report.per_tensor["input0"] < 1e-6


def test_grad_check_composite():
    from oaknee.models import TinyCnn

    model = TinyCnn(seed=0, dtype=np.float64, input_grad=True)
    for _, lay in model.named_layers():
        if isinstance(lay, tn.Dropout):
            lay.fixed_seed = 0
    assert tn.grad_check(model, (2, 1, 48, 48), 1e-4, max_entries=4).passed


def test_one_batch_loss_reproducible():
    from oaknee.models import TinyCnn

    x = rng(9).random((4, 1, 48, 48)).astype(np.float32)
    losses = []
    for _ in range(2):
        m = TinyCnn(seed=3)
        for _, lay in m.named_layers():
            if isinstance(lay, tn.Dropout):
                lay.rng = rng(11)
        losses.append(tn.softmax_cross_entropy(m.forward(x, train=True), [0, 1, 0, 1])[0])
    assert losses[0] == losses[1]
