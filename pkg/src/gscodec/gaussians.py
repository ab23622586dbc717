"""Decoder heads, pixel-aligned 2D-to-3D mapping, a dense differentiable
splatting renderer, and image metrics."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv, inverse_depth_channel, lrelu
from .geometry import backproject, denormalize_depth, pixel_grid
from .tensors import cat_channels

ATTR_CHANNELS = 11  # opacity 1, scale 3, rotation 4, color 3
ALPHA_MAX = 0.999
COV_EPS = 1e-6
Z_NEAR = 1e-2


@dataclass
class GaussianPrimitive:
    center: torch.Tensor
    scale: torch.Tensor
    rotation: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor


@dataclass
class GaussianSet:
    centers: torch.Tensor  # (G, 3)
    scales: torch.Tensor  # (G, 3)
    rotations: torch.Tensor  # (G, 4) unit quaternions, w first
    opacities: torch.Tensor  # (G,)
    colors: torch.Tensor  # (G, 3)

    def __len__(self):
        return self.centers.shape[0]

    def __getitem__(self, i):
        return GaussianPrimitive(self.centers[i], self.scales[i], self.rotations[i],
                                 self.opacities[i], self.colors[i])

    @classmethod
    def empty(cls, dtype=torch.float32):
        return cls(*(torch.zeros(shape, dtype=dtype) for shape in ((0, 3), (0, 3), (0, 4), (0,), (0, 3))))

    @classmethod
    def concat(cls, sets):
        return cls(*(torch.cat([getattr(s, f) for s in sets]) for f in
                     ("centers", "scales", "rotations", "opacities", "colors")))


@dataclass
class GaussianAttrMap:
    """Activated per-pixel attributes, each ``(N, k, H, W)``."""

    opacity: torch.Tensor
    scale: torch.Tensor
    rotation: torch.Tensor
    color: torch.Tensor


class DepthHead(nn.Module):
    """Feature -> normalized inverse depth ``S`` in (0, 1)."""

    def __init__(self, c_f=32, hidden=32):
        super().__init__()
        self.net = nn.Sequential(conv(c_f, hidden), lrelu(), conv(hidden, hidden), lrelu(), conv(hidden, 1))

    def forward(self, feature):
        return torch.sigmoid(self.net(feature))[:, 0]


def activate(raw, depth, focal):
    """Map raw head output ``(N, 11, H, W)`` to Gaussian attributes.

    Scales are softplus outputs in units of the pixel footprint ``depth / focal``.
    """
    o, s, q, c = torch.split(raw, [1, 3, 4, 3], dim=1)
    footprint = (depth / focal[:, None, None])[:, None]
    q = q + q.new_tensor([1.0, 0.0, 0.0, 0.0])[None, :, None, None]
    return GaussianAttrMap(torch.sigmoid(o), F.softplus(s) * footprint,
                           F.normalize(q, dim=1), torch.sigmoid(c))


class GaussianHead(nn.Module):
    def __init__(self, c_f=32, hidden=32):
        super().__init__()
        self.net = nn.Sequential(conv(c_f + 1, hidden), lrelu(), conv(hidden, hidden), lrelu(),
                                 conv(hidden, ATTR_CHANNELS, 1))

    def forward(self, feature, depth, cameras):
        """``feature`` ``(N, C, H, W)``, metric ``depth`` ``(N, H, W)``."""
        raw = self.net(cat_channels([feature, inverse_depth_channel(depth, cameras)]))
        focal = depth.new_tensor([0.5 * (c.fx + c.fy) for c in cameras])
        return activate(raw, depth, focal)


def metric_depth(s, cameras):
    near = s.new_tensor([c.near for c in cameras])[:, None, None]
    far = s.new_tensor([c.far for c in cameras])[:, None, None]
    return denormalize_depth(s, near, far)


def map_2d_to_3d(depths, attrs, cameras):
    """One Gaussian per pixel per view, centered on the backprojected pixel."""
    n, h, w = depths.shape
    u, v = pixel_grid(h, w, depths.dtype, depths.device)
    sets = []
    for i, cam in enumerate(cameras):
        centers = backproject(cam, u, v, depths[i]).reshape(-1, 3)
        scale, rot, opacity, color = (t[i].reshape(t.shape[1], -1).T for t in
                                      (attrs.scale, attrs.rotation, attrs.opacity, attrs.color))
        sets.append(GaussianSet(centers, scale, rot, opacity[:, 0], color))
    return GaussianSet.concat(sets)


def quaternion_to_matrix(q):
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(*q.shape[:-1], 3, 3)


def project_gaussians(gaussians, camera):
    """Screen-space means ``(G, 2)``, inverse 2D covariances ``(G, 3)`` (a, b, c), depths ``(G,)``."""
    rot, trans = camera.torch(gaussians.centers.dtype, gaussians.centers.device)
    pc = gaussians.centers @ rot.T + trans
    x, y, z = pc.unbind(-1)
    zs = z.clamp(min=Z_NEAR)
    mean = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], dim=-1)
    m = quaternion_to_matrix(gaussians.rotations) * gaussians.scales[:, None, :]
    cov = rot @ (m @ m.transpose(1, 2)) @ rot.T
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([camera.fx / zs, zero, -camera.fx * x / zs ** 2], -1),
        torch.stack([zero, camera.fy / zs, -camera.fy * y / zs ** 2], -1),
    ], dim=1)
    cov2 = jac @ cov @ jac.transpose(1, 2)
    a = cov2[:, 0, 0] + COV_EPS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV_EPS
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    return mean, conic, z


def _composite(alpha, colors):
    """Front-to-back over the last axis: ``(..., K)`` alphas, ``(..., K, 3)`` colors."""
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    before = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = alpha * before
    return (weights[..., None] * colors).sum(-2), weights, trans[..., -1]


def _splat_alpha(dx, dy, conic, opacity, cull_sigma):
    maha = conic[..., 0] * dx * dx + 2 * conic[..., 1] * dx * dy + conic[..., 2] * dy * dy
    alpha = opacity * torch.exp(-0.5 * maha)
    if cull_sigma is not None:
        alpha = torch.where(maha <= cull_sigma ** 2, alpha, torch.zeros_like(alpha))
    return alpha.clamp(max=ALPHA_MAX)


def _screen_radius(conic, cull_sigma):
    """Half-extent of the ``cull_sigma`` ellipse along x and y, from the inverse covariance."""
    a, b, c = conic.unbind(-1)
    det = a * c - b * b
    return cull_sigma * torch.sqrt(c / det), cull_sigma * torch.sqrt(a / det)


def render(gaussians, camera, height, width, background=None, cull_sigma=3.0, return_weights=False, tile=4):
    """Front-to-back alpha compositing of depth-sorted splats onto an ``(3, H, W)`` image.

    One global depth sort; splats farther than ``cull_sigma`` Mahalanobis units
    contribute nothing.  With ``tile`` set, each ``tile x tile`` pixel block only
    visits splats whose culling ellipse can reach it, which gives the same image
    as the dense path (``tile=None``) at a fraction of the cost.
    """
    dtype = gaussians.centers.dtype
    if background is None:
        background = torch.zeros(3, dtype=dtype)
    background = torch.as_tensor(background, dtype=dtype)
    u, v = pixel_grid(height, width, dtype)
    order = torch.zeros(0, dtype=torch.long)
    if len(gaussians):
        mean, conic, depth = project_gaussians(gaussians, camera)
        order = torch.argsort(depth.detach(), stable=True)
        order = order[depth[order].detach() > Z_NEAR]
    if order.numel() == 0:
        image = background[:, None, None].expand(3, height, width).clone()
        if return_weights:
            return image, torch.zeros(height * width, 0, dtype=dtype), torch.ones(height * width, dtype=dtype)
        return image

    mean, conic = mean[order], conic[order]
    opacity, colors = gaussians.opacities[order], gaussians.colors[order]
    if tile is None or cull_sigma is None or return_weights:
        dx = u.reshape(-1, 1) - mean[None, :, 0]
        dy = v.reshape(-1, 1) - mean[None, :, 1]
        alpha = _splat_alpha(dx, dy, conic[None], opacity[None], cull_sigma)
        rgb, weights, final = _composite(alpha, colors[None])
        image = (rgb + final[:, None] * background[None, :]).T.reshape(3, height, width)
        if return_weights:
            return image, weights, final
        return image
    return _render_tiled(mean, conic, opacity, colors, u, v, background, cull_sigma, tile)


def _render_tiled(mean, conic, opacity, colors, u, v, background, cull_sigma, tile):
    height, width = u.shape
    ty, tx = -(-height // tile), -(-width // tile)
    with torch.no_grad():
        rx, ry = _screen_radius(conic, cull_sigma)
        finite = torch.isfinite(rx) & torch.isfinite(ry)
        x0 = torch.arange(tx, dtype=mean.dtype) * tile
        y0 = torch.arange(ty, dtype=mean.dtype) * tile
        # splat i touches tile (j, k) when its bounding box overlaps the tile's pixel centers
        hit_x = (mean[None, :, 0] + rx[None] >= x0[:, None]) & (mean[None, :, 0] - rx[None] <= x0[:, None] + tile - 1)
        hit_y = (mean[None, :, 1] + ry[None] >= y0[:, None]) & (mean[None, :, 1] - ry[None] <= y0[:, None] + tile - 1)
        hits = (hit_y[:, None, :] & hit_x[None, :, :] & finite).reshape(ty * tx, -1)
        counts = hits.sum(1)
        k = max(int(counts.max()), 1)
        # stable sort keeps the global depth order within each tile
        idx = torch.argsort((~hits).to(torch.int8), dim=1, stable=True)[:, :k]
        used = torch.arange(k)[None, :] < counts[:, None]
    pad_h, pad_w = ty * tile, tx * tile
    pu = F.pad(u, (0, pad_w - width, 0, pad_h - height))
    pv = F.pad(v, (0, pad_w - width, 0, pad_h - height))
    tiles_u = pu.reshape(ty, tile, tx, tile).permute(0, 2, 1, 3).reshape(ty * tx, tile * tile, 1)
    tiles_v = pv.reshape(ty, tile, tx, tile).permute(0, 2, 1, 3).reshape(ty * tx, tile * tile, 1)
    m, cn = mean[idx], conic[idx]
    dx = tiles_u - m[:, None, :, 0]
    dy = tiles_v - m[:, None, :, 1]
    op = torch.where(used, opacity[idx], torch.zeros_like(opacity[idx]))
    alpha = _splat_alpha(dx, dy, cn[:, None], op[:, None], cull_sigma)
    rgb, _, final = _composite(alpha, colors[idx][:, None])
    rgb = rgb + final[..., None] * background
    image = rgb.reshape(ty, tx, tile, tile, 3).permute(4, 0, 2, 1, 3).reshape(3, pad_h, pad_w)
    return image[:, :height, :width]


# --- metrics ----------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a, b):
    mse = torch.mean((torch.as_tensor(a) - torch.as_tensor(b)) ** 2).item()
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, data_range=1.0):
    """Mean SSIM of ``(C, H, W)`` images: 11x11 Gaussian window (sigma 1.5), valid region."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    c = a.shape[0]
    win = _gaussian_window()[None, None].expand(c, 1, 11, 11)

    def filt(t):
        return F.conv2d(t[None], win, groups=c)[0]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
