import pytest
import torch

from CLfD.backbone import (
    AdamOptimizer,
    ParameterSet,
    adam_step,
    backward,
    forward_op,
    grad_check,
    grad_check_module,
    load_archive,
    save_archive,
)
from CLfD.exceptions import CheckpointError, GraphError, NonFiniteError, ShapeError
from CLfD.losses import nt_xent_batch
from CLfD.models import build_model


def test_conv2d_output_shape():
    x = torch.zeros(2, 3, 64, 64)
    w = torch.zeros(16, 3, 3, 3)
    out = forward_op("conv2d", x, w, torch.zeros(16), stride=2, padding=1)
    assert list(out.shape) == [2, 16, 32, 32]


def test_conv2d_channel_mismatch_names_op():
    with pytest.raises(ShapeError, match="conv2d"):
        forward_op("conv2d", torch.zeros(1, 4, 8, 8), torch.zeros(2, 3, 3, 3))


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError, match="linear"):
        forward_op("linear", torch.zeros(2, 5), torch.zeros(3, 4))


def test_unknown_op():
    with pytest.raises(ShapeError):
        forward_op("softmax", torch.zeros(2))


def test_l2_normalize_zero_row():
    with pytest.raises(NonFiniteError):
        forward_op("l2_normalize", torch.tensor([[0.0, 0.0], [1.0, 0.0]]))


def test_backward_gradient_of_weighted_sum():
    w = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (w * torch.tensor([4.0, 5.0, 6.0])).sum()
    grads = backward(loss, {"w": w})
    assert torch.equal(grads["w"], torch.tensor([4.0, 5.0, 6.0]))


def test_backward_unused_parameter_gets_zero():
    used = torch.ones(2, requires_grad=True)
    unused = torch.ones(3, requires_grad=True)
    grads = backward(used.sum(), {"used": used, "unused": unused})
    assert torch.equal(grads["unused"], torch.zeros(3))


def test_backward_twice_raises():
    w = torch.ones(2, requires_grad=True)
    loss = (w ** 2).sum()
    backward(loss, {"w": w})
    with pytest.raises(GraphError):
        backward(loss, {"w": w})


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(grad)
    w = torch.nn.Parameter(torch.tensor([1.0, -1.0], dtype=torch.float64))
    params = ParameterSet({"w": w})
    optimizer = AdamOptimizer(params, lr=0.1)
    adam_step(optimizer, {"w": torch.tensor([0.5, -2.0], dtype=torch.float64)})
    assert torch.allclose(w.detach(), torch.tensor([0.9, -0.9], dtype=torch.float64), atol=1e-6)
    assert optimizer.step_count == 1


def test_adam_zero_lr_keeps_params_but_updates_moments():
    w = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    optimizer = AdamOptimizer(ParameterSet({"w": w}), lr=0.0)
    adam_step(optimizer, {"w": torch.tensor([1.0, 1.0])})
    m, v = optimizer.moments()["w"]
    assert torch.equal(w.detach(), torch.tensor([1.0, 2.0]))
    assert torch.allclose(m, torch.tensor([0.1, 0.1]))
    assert torch.allclose(v, torch.tensor([0.001, 0.001]))


def test_adam_rejects_non_finite_gradient():
    w = torch.nn.Parameter(torch.zeros(2))
    optimizer = AdamOptimizer(ParameterSet({"w": w}))
    with pytest.raises(NonFiniteError, match="w"):
        adam_step(optimizer, {"w": torch.tensor([float("nan"), 0.0])})


def test_grad_check_linear_layer():
    x = torch.randn(3, 4, dtype=torch.float64)
    w = torch.randn(2, 4, dtype=torch.float64)
    b = torch.randn(2, dtype=torch.float64)
    report = grad_check(lambda *t: forward_op("linear", *t), [x, w, b])
    assert report.passed
    assert report.max_rel_error < 1e-4


def test_grad_check_conv_pool_and_normalize():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    w = torch.randn(4, 3, 3, 3, dtype=torch.float64)

    def fn(x, w):
        y = forward_op("conv2d", x, w, None, stride=2, padding=1)
        return forward_op("l2_normalize", forward_op("global_avg_pool", y))

    assert grad_check(fn, [x, w]).passed


def test_grad_check_relu_and_batch_mean():
    x = torch.tensor([[0.5, -1.0, 2.0], [1.5, -0.3, 0.7]], dtype=torch.float64)
    report = grad_check(lambda t: forward_op("batch_mean", forward_op("relu", t)), [x])
    assert report.passed


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, grad):
            return grad * torch.ones(3, dtype=torch.float64)

    report = grad_check(Wrong.apply, [torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)])
    assert not report.passed
    assert report.failures


def test_grad_check_loss_through_encoder():
    model = build_model(seed=3)
    images = torch.rand(8, 3, 64, 64, dtype=torch.float64)
    report = grad_check_module(model, [images], loss_fn=nt_xent_batch, max_entries=40, seed=1)
    assert report.passed, report.failures


def test_archive_round_trip_and_metadata(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([1.5])}
    digest = save_archive(tmp_path / "x.ckpt", tensors, {"epoch": 3})
    loaded, meta = load_archive(tmp_path / "x.ckpt")
    assert len(digest) == 64
    assert meta == {"epoch": 3}
    assert list(loaded) == ["a", "b"]
    assert torch.equal(loaded["a"], tensors["a"])


def test_archive_is_deterministic(tmp_path):
    tensors = {"w": torch.linspace(0, 1, 10)}
    assert save_archive(tmp_path / "a.ckpt", tensors) == save_archive(tmp_path / "b.ckpt", tensors)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_archive_truncated(tmp_path):
    path = tmp_path / "x.ckpt"
    save_archive(path, {"w": torch.ones(100)})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_archive(path)


def test_archive_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_archive(path)


def test_adam_zero_gradient_leaves_params_bit_identical():
    w = torch.nn.Parameter(torch.tensor([0.123456789, -7.5, 1e-20]))
    b = torch.nn.Parameter(torch.tensor([3.0]))
    before = [w.detach().clone(), b.detach().clone()]
    optimizer = AdamOptimizer(ParameterSet({"w": w, "b": b}), lr=0.1)
    adam_step(optimizer, {"w": torch.zeros(3)})
    assert torch.equal(w.detach(), before[0])
    assert torch.equal(b.detach(), before[1])


def test_backward_squared_norm():
    z = torch.tensor([3.0, 4.0], requires_grad=True)
    grads = backward((z ** 2).sum(), {"z": z})
    assert torch.equal(grads["z"], torch.tensor([6.0, 8.0]))


def test_forward_is_deterministic():
    images = torch.rand(4, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    first, second = build_model(seed=5), build_model(seed=5)
    with torch.no_grad():
        out = first(images)
        assert torch.equal(out, first(images))
        assert torch.equal(out, second(images))
