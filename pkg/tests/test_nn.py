import numpy as np
import pytest

from src.nn import Adam, Conv2d, Dense, Dropout, LayerNorm, Module, ReLU, Tensor, concat, dropout, no_grad
from src.nn import tensor as ops
from src.nn.checkpoint import load_checkpoint, save_checkpoint
from src.utils.errors import ConfigError, ShapeError, UsageError
from tests.conftest import gradcheck


@pytest.fixture
def r():
    return np.random.default_rng(7)


# Each gradient check runs on this many independently drawn inputs.
@pytest.fixture(params=range(100))
def instance(request):
    return np.random.default_rng(request.param)


def test_elementwise_gradients(instance):
    a, b = instance.standard_normal((3, 4)), instance.standard_normal((3, 4))
    gradcheck(lambda x, y: x + y, a, b)
    gradcheck(lambda x, y: x - y, a, b)
    gradcheck(lambda x, y: x * y, a, b)
    gradcheck(lambda x, y: x / y, a, np.abs(b) + 0.5)
    gradcheck(lambda x: -x, a)
    gradcheck(lambda x: x.exp(), a)
    gradcheck(lambda x: x.log(), np.abs(a) + 0.5)


def test_broadcast_gradients(instance):
    gradcheck(lambda x, y: x * y + y, instance.standard_normal((2, 3, 4)), instance.standard_normal(4))
    gradcheck(lambda x, y: x / y, instance.standard_normal((3, 4)),
               np.abs(instance.standard_normal((3, 1))) + 0.5)


def test_reduction_and_shape_gradients(instance):
    a = instance.standard_normal((2, 3, 4))
    gradcheck(lambda x: x.sum(axis=1), a)
    gradcheck(lambda x: x.mean(axis=-1, keepdims=True), a)
    gradcheck(lambda x: x.mean(), a)
    gradcheck(lambda x: x.reshape(6, 4), a)
    gradcheck(lambda x: x[:, 1:, ::2], a)
    gradcheck(lambda x: x[..., 1], a)


def test_matmul_gradient(instance):
    gradcheck(lambda x, w: x @ w, instance.standard_normal((5, 3)), instance.standard_normal((3, 2)))
    gradcheck(lambda x, w: x @ w, instance.standard_normal((2, 4, 3)), instance.standard_normal((3, 2)))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_nonlinearity_gradients(instance):
    a = instance.standard_normal((4, 5))
    a[np.abs(a) < 0.05] = 0.3
    gradcheck(lambda x: x.relu(), a)
    gradcheck(lambda x: x.softmax(), a)
    gradcheck(lambda x: x.clip(-0.5, 0.5), np.where(np.abs(np.abs(a) - 0.5) < 0.05, 0.2, a))
    gradcheck(lambda x: ops.LayerNormalize.apply(x, eps=1e-5), a)


@pytest.mark.slow
def test_spatial_gradients(instance):
    x = instance.standard_normal((2, 4, 4, 3))
    conv = ops.Conv2d.apply
    gradcheck(conv, x, instance.standard_normal((3, 3, 3, 2)), instance.standard_normal(2))
    gradcheck(conv, x, instance.standard_normal((1, 1, 3, 2)), instance.standard_normal(2))
    gradcheck(lambda t: ops.MaxPool2.apply(t), x)
    gradcheck(lambda t: ops.Upsample2.apply(t), x)
    gradcheck(lambda s, t: concat([s, t]), x, instance.standard_normal((2, 4, 4, 1)))


def test_identity_kernel_convolution_returns_input(r):
    x = r.standard_normal((1, 5, 6, 2)).astype(np.float32)
    w = np.zeros((3, 3, 2, 2), dtype=np.float32)
    w[1, 1] = np.eye(2)
    out = ops.Conv2d.apply(Tensor(x), Tensor(w), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_softmax_rows_sum_to_one(r):
    y = Tensor(r.standard_normal((3, 4, 4, 2)) * 50).softmax()
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=1e-6)


def test_pool_and_upsample_preserve_constants():
    x = Tensor(np.full((1, 4, 6, 2), 2.5))
    np.testing.assert_array_equal(ops.MaxPool2.apply(x).data, np.full((1, 2, 3, 2), 2.5))
    np.testing.assert_array_equal(ops.Upsample2.apply(x).data, np.full((1, 8, 12, 2), 2.5))


def test_relu_gradient_matches_sign():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])


def test_constant_branch_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    (x * c).sum().backward()
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_misuse_raises():
    with pytest.raises(UsageError):
        Tensor(np.ones(3), requires_grad=True).backward()
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_no_grad_skips_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.ctx is None and not y.requires_grad


def test_adam_ignores_zero_gradient():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_minimizes_quadratic():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        ((p - 3.0) * (p - 3.0)).sum().backward()
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-2


def test_adam_is_deterministic(r):
    targets = r.standard_normal(4)

    def run():
        p = Tensor(np.zeros(4), requires_grad=True)
        opt = Adam([p], lr=0.01)
        for _ in range(50):
            opt.zero_grad()
            ((p - Tensor(targets)) * (p - Tensor(targets))).sum().backward()
            opt.step()
        return p.data

    np.testing.assert_array_equal(run(), run())


def test_adam_gradient_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ShapeError):
        Adam([p]).step([np.zeros(3)])


def test_dropout_behaviour():
    x = Tensor(np.ones(100_000, dtype=np.float32))
    rng = np.random.default_rng(3)
    assert dropout(x, 0.5, rng, training=False) is x
    assert dropout(x, 0.0, rng, training=True) is x
    y = dropout(x, 0.5, rng, training=True).data
    assert abs(np.mean(y == 0) - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.02
    with pytest.raises(ValueError):
        dropout(x, 1.0, rng, training=True)
    with pytest.raises(ValueError):
        Dropout(-0.1)


class _SmallNet(Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = Conv2d(2, 3, 3, rng, name="conv")
        self.relu = ReLU()
        self.dense = Dense(3, 4, rng, name="dense")
        self.norm = LayerNorm(4, name="norm")
        self.out = Dense(4, 2, rng, name="out")

    def forward(self, x):
        h = self.relu(self.conv(x))
        pooled = ops.MaxPool2.apply(h)
        h = self.norm(self.dense(ops.Upsample2.apply(pooled)))
        return self.out(h).softmax()


def test_small_network_parameter_gradients(r):
    net = _SmallNet(np.random.default_rng(1)).astype(np.float64)
    x = Tensor(r.standard_normal((1, 4, 4, 2)))
    weights = r.standard_normal((1, 4, 4, 2))
    loss = (net(x) * Tensor(weights)).sum()
    net.zero_grad()
    loss.backward()
    for name, p in net.named_parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        for pos in np.ndindex(p.data.shape):
            original = p.data[pos]
            values = []
            for delta in (1e-6, -1e-6):
                p.data[pos] = original + delta
                with no_grad():
                    values.append(float(np.sum(net(x).data * weights)))
            p.data[pos] = original
            numeric[pos] = (values[0] - values[1]) / 2e-6
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=name)


def test_parameter_discovery_order():
    net = _SmallNet(np.random.default_rng(1))
    names = [n for n, _ in net.named_parameters()]
    assert names == [
        "conv.weight", "conv.bias", "dense.weight", "dense.bias",
        "norm.gain", "norm.offset", "out.weight", "out.bias",
    ]


def test_load_state_dict_rejects_mismatch():
    net = _SmallNet(np.random.default_rng(1))
    state = net.state_dict()
    state["out.bias"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(ShapeError):
        net.load_state_dict(state)
    with pytest.raises(ShapeError):
        net.load_state_dict({})


def test_even_kernel_rejected():
    with pytest.raises(ShapeError):
        Conv2d(1, 1, 2, np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path, r):
    net = _SmallNet(np.random.default_rng(1))
    opt = Adam(net.parameters(), lr=1e-2)
    loss = (net(Tensor(r.standard_normal((1, 4, 4, 2)).astype(np.float32))) * 1.0).sum()
    loss.backward()
    opt.step()
    stream = np.random.default_rng(99)
    stream.random(5)
    path = tmp_path / "net.nnck"
    size = save_checkpoint(path, "small", net, meta={"epoch": 1}, optimizer=opt, rngs={"dropout": stream})
    assert size == path.stat().st_size
    expected_draws = stream.random(3)

    ckpt = load_checkpoint(path)
    assert ckpt.model == "small" and ckpt.meta == {"epoch": 1}
    assert [layer["name"] for layer in ckpt.layers][:2] == ["conv", "relu"]

    fresh = _SmallNet(np.random.default_rng(2))
    fresh_opt = Adam(fresh.parameters(), lr=1e-2)
    fresh_stream = np.random.default_rng(0)
    ckpt.restore(fresh, fresh_opt, {"dropout": fresh_stream})
    for (name, a), (_, b) in zip(net.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    for a, b in zip(opt.m + opt.v, fresh_opt.m + fresh_opt.v):
        np.testing.assert_array_equal(a, b)
    assert fresh_opt.step_count == 1
    np.testing.assert_array_equal(fresh_stream.random(3), expected_draws)


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.nnck"
    bad.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(UsageError):
        load_checkpoint(bad)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.nnck")
