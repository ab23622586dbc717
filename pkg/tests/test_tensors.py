import numpy as np
import pytest
import torch
from torch import nn

from gscodec import tensors
from gscodec.tensors import (
    CheckpointError, ShapeError, bilinear_sample, cat_channels, expect_shape, gradient_error,
    load_checkpoint, save_checkpoint,
)


def manual_bilinear(img, u, v):
    """Per-point reference: zero outside, weights from the four neighbours."""
    c, h, w = img.shape
    out = np.zeros((c, len(u)))
    for k, (x, y) in enumerate(zip(u, v)):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        for dx in (0, 1):
            for dy in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                wgt = (1 - abs(x - xi)) * (1 - abs(y - yi))
                if 0 <= xi < w and 0 <= yi < h:
                    out[:, k] += wgt * img[:, yi, xi]
    return out


def test_bilinear_matches_manual_oracle():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(3, 5, 7))
    u = rng.uniform(-1.5, 7.5, 200)
    v = rng.uniform(-1.5, 5.5, 200)
    got, inside = bilinear_sample(torch.tensor(img)[None], torch.tensor(u)[None], torch.tensor(v)[None])
    np.testing.assert_allclose(got[0].numpy(), manual_bilinear(img, u, v), atol=1e-12)
    assert inside[0].numpy().tolist() == ((u >= 0) & (u <= 6) & (v >= 0) & (v <= 4)).tolist()


def test_bilinear_hits_pixel_centers_exactly():
    img = torch.arange(12.0, dtype=torch.float64).reshape(1, 1, 3, 4)
    u, v = torch.meshgrid(torch.arange(4.0), torch.arange(3.0), indexing="xy")
    got, _ = bilinear_sample(img, u[None].double(), v[None].double())
    assert torch.equal(got, img)


def test_bilinear_gradient_fd():
    torch.manual_seed(0)
    img = torch.randn(1, 2, 4, 5, dtype=torch.float64)
    for _ in range(20):
        # keep coordinates off the integer grid where the kernel has kinks
        u = torch.rand(1, 6, dtype=torch.float64) * 3.6 + 0.2
        v = torch.rand(1, 6, dtype=torch.float64) * 2.6 + 0.2
        u = u.floor() + 0.1 + 0.8 * (u - u.floor())
        v = v.floor() + 0.1 + 0.8 * (v - v.floor())
        w = torch.randn(1, 2, 6, dtype=torch.float64)
        assert gradient_error(lambda x: (bilinear_sample(x, u, v)[0] * w).sum(), img, 1e-6) < 1e-4
        assert gradient_error(lambda x: (bilinear_sample(img, x, v)[0] * w).sum(), u, 1e-6) < 1e-4


def test_shape_errors_name_the_dimension():
    a = torch.zeros(2, 3, 4, 5)
    with pytest.raises(ShapeError, match="height"):
        cat_channels([a, torch.zeros(2, 1, 6, 5)])
    with pytest.raises(ShapeError, match="dimension 1"):
        expect_shape(a, (2, 4, None, None), "x")
    with pytest.raises(ShapeError, match="expected 3 dims"):
        expect_shape(a, (2, 3, 4), "x")
    assert cat_channels([a, torch.zeros(2, 1, 4, 5)]).shape == (2, 4, 4, 5)


def test_checkpoint_round_trip(tmp_path):
    net = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Linear(2, 5))
    tensors.init_module(net, torch.Generator().manual_seed(1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net.state_dict(), {"stage": 1})
    state, meta = load_checkpoint(path)
    assert meta == {"stage": 1}
    for k, v in net.state_dict().items():
        assert torch.equal(state[k], v.float())


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": torch.ones(2)})
    raw = bytearray(path.read_bytes())
    raw[4] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(path)
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": torch.ones(4, 4)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_init_is_seeded_and_fan_in_scaled():
    a = nn.Conv2d(8, 4, 3)
    b = nn.Conv2d(8, 4, 3)
    tensors.init_module(a, torch.Generator().manual_seed(3))
    tensors.init_module(b, torch.Generator().manual_seed(3))
    assert torch.equal(a.weight, b.weight)
    assert a.weight.abs().max() <= (6.0 / 72) ** 0.5
    assert torch.all(a.bias == 0)


def test_parameter_tags_and_optimizer():
    net = nn.ModuleDict({"enc": nn.Linear(2, 2), "dec": nn.Linear(2, 2)})
    hit = tensors.set_trainable(net, ("enc.",), False)
    assert hit == ["enc.weight", "enc.bias"]
    params = tensors.trainable_parameters(net)
    assert len(params) == 2
    opt = tensors.make_optimizer(params)
    group = opt.param_groups[0]
    assert isinstance(opt, torch.optim.AdamW)
    assert group["lr"] == 1e-4 and group["weight_decay"] == 0.01


def test_fd_oracle_on_closed_form():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    g = tensors.fd_gradient(lambda t: (t ** 3).sum(), x, 1e-5)
    np.testing.assert_allclose(g.numpy(), 3 * x.numpy() ** 2, rtol=1e-8)


def test_backward_rejects_non_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ShapeError):
        tensors.backward(x * 2)
    tensors.backward((x * 2).sum())
    assert torch.equal(x.grad, torch.full((3,), 2.0))
