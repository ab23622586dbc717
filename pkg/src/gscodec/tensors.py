"""Tensor plumbing on top of torch: sampling kernels, init, parameter tags,
checkpoint files, the optimizer, and a finite-difference gradient oracle."""

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

Tensor = torch.Tensor
INSIDE_TOL = 1e-6  # border samples that only miss by round-off still count as inside


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def expect_shape(x, shape, name="tensor"):
    """Check ``x.shape`` against ``shape`` (``None`` entries are wildcards)."""
    if x.dim() != len(shape):
        raise ShapeError(f"{name}: expected {len(shape)} dims, got {x.dim()} (shape {tuple(x.shape)})")
    for i, (got, want) in enumerate(zip(x.shape, shape)):
        if want is not None and got != want:
            raise ShapeError(f"{name}: dimension {i} is {got}, expected {want}")


def cat_channels(tensors):
    """Concatenate ``(N, C_i, H, W)`` tensors along channels after checking N, H, W agree."""
    ref = tensors[0]
    for k, t in enumerate(tensors[1:], 1):
        for dim, label in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[dim] != ref.shape[dim]:
                raise ShapeError(f"input {k}: {label} (dimension {dim}) is {t.shape[dim]}, expected {ref.shape[dim]}")
    return torch.cat(tensors, dim=1)


def bilinear_sample(feature, u, v):
    """Sample ``feature`` ``(B, C, H, W)`` at pixel coordinates ``u``, ``v`` ``(B, ...)``.

    Pixel centers sit on integer coordinates. Outside the image the feature is
    zero-padded; ``inside`` flags samples whose full bilinear footprint lies in
    the image.
    """
    b, _, h, w = feature.shape
    out_shape = u.shape[1:]
    gx = 2.0 * u.reshape(b, -1, 1) / max(w - 1, 1) - 1.0
    gy = 2.0 * v.reshape(b, -1, 1) / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(feature, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    out = out.reshape(b, feature.shape[1], *out_shape)
    tol = INSIDE_TOL
    inside = (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    return out, inside


def resize(x, size, mode="bilinear"):
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode=mode, align_corners=True)


def init_module(module, generator=None):
    """Fan-in scaled uniform weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
            if isinstance(m, nn.ConvTranspose2d):
                stride = m.stride[0] * m.stride[1]
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] / stride
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def zero_module(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def set_trainable(model, prefixes, trainable=True):
    """Flip ``requires_grad`` on parameters whose name starts with one of ``prefixes``."""
    hit = []
    for name, p in model.named_parameters():
        if any(name.startswith(pre) for pre in prefixes):
            p.requires_grad_(trainable)
            hit.append(name)
    return hit


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(params, lr=1e-4, weight_decay=0.01):
    """AdamW with decoupled weight decay; only pass trainable parameters."""
    return torch.optim.AdamW(list(params), lr=lr, weight_decay=weight_decay)


# --- checkpoint files -------------------------------------------------------
#
#   "GSCK" | version u8 | u32 meta length | JSON meta | u32 count
#   manifest: count x (u16 name length | utf-8 name | u8 ndim | ndim x u32)
#   payload:  count x raw little-endian f32 values, manifest order

CKPT_MAGIC = b"GSCK"
CKPT_VERSION = 1


def save_checkpoint(path, state, meta=None):
    items = list(state.items())
    parts = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION)]
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(items))]
    for name, t in items:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
    for _, t in items:
        parts.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(state, meta)``; raises :class:`CheckpointError` on format mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 5 or data[4] != CKPT_VERSION:
        got = data[4] if len(data) > 4 else None
        raise CheckpointError(f"{path}: checkpoint format version {got}, expected {CKPT_VERSION}")
    pos = 5
    (mlen,) = struct.unpack_from("<I", data, pos)
    meta = json.loads(data[pos + 4:pos + 4 + mlen])
    pos += 4 + mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        ndim = data[pos]
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        manifest.append((name, shape))
    state = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: payload for {name} truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * n
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return state, meta


# --- finite differences -----------------------------------------------------

def fd_gradient(fn, x, step=1e-4):
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (any shape)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn(x))
            flat[i] = orig - step
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def analytic_gradient(fn, x):
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ShapeError(f"loss must be scalar, got shape {tuple(out.shape)}")
    (g,) = torch.autograd.grad(out, x)
    return g


def gradient_error(fn, x, step=1e-4):
    """Relative L2 mismatch between autograd and central differences."""
    a = analytic_gradient(fn, x)
    n = fd_gradient(fn, x, step)
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / denom


def directional_gradient_error(fn, x, directions=4, step=1e-6, generator=None):
    """Worst relative mismatch of autograd vs central differences along random directions.

    Cheaper than :func:`gradient_error` for large inputs: each direction costs
    two extra evaluations.
    """
    g = analytic_gradient(fn, x)
    worst = 0.0
    with torch.no_grad():
        for _ in range(directions):
            d = torch.randn(x.shape, dtype=x.dtype, generator=generator)
            num = (float(fn(x + step * d)) - float(fn(x - step * d))) / (2 * step)
            ana = float((g * d).sum())
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return worst


def backward(loss):
    """Accumulate gradients of a scalar ``loss`` into every reachable leaf."""
    if loss.numel() != 1:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
