"""Pinhole cameras, depth warping between views, and the bounded
inverse-depth parameterization.

Conventions: pixel centers on integer coordinates (``u`` = column,
``v`` = row); extrinsics map world to camera, ``X_c = R X_w + t``; depth is
the camera-frame ``z``.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .tensors import bilinear_sample

BEHIND_EPS = 1e-3


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.far > self.near > 0):
            raise ValueError(f"camera bounds need far > near > 0, got near={self.near}, far={self.far}")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    @property
    def intrinsics(self):
        return (self.fx, self.fy, self.cx, self.cy)

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def scaled(self, factor):
        """Intrinsics for a grid subsampled by ``1/factor`` (pixel ``j`` -> ``j*factor``)."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      self.rotation, self.translation, self.near, self.far)

    def torch(self, dtype=torch.float64, device=None):
        kw = dict(dtype=dtype, device=device)
        return (torch.tensor(self.rotation, **kw), torch.tensor(self.translation, **kw))

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, near, far, up=(0.0, -1.0, 0.0)):
        """Camera at ``eye`` looking at ``target``; y points down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(fx, fy, cx, cy, rot, -rot @ eye, near, far)


@dataclass
class DepthMap:
    """Depth values tagged with their domain: ``"metric"`` or ``"normalized"``."""

    values: torch.Tensor
    domain: str

    def __post_init__(self):
        if self.domain not in ("metric", "normalized"):
            raise ValueError(f"unknown depth domain {self.domain!r}")

    def require(self, domain):
        if self.domain != domain:
            raise ValueError(f"expected {domain} depth, got {self.domain}")
        return self.values


def _metric(depth):
    return depth.require("metric") if isinstance(depth, DepthMap) else depth


def pixel_grid(height, width, dtype=torch.float64, device=None):
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                          torch.arange(width, dtype=dtype, device=device), indexing="ij")
    return u, v


def project(camera, points):
    """World points ``(..., 3)`` -> ``(u, v, depth, valid)``; behind-camera points are flagged."""
    rot, trans = camera.torch(points.dtype, points.device)
    pc = points @ rot.T + trans
    z = pc[..., 2]
    valid = z > camera.near * BEHIND_EPS
    safe = torch.where(valid, z, torch.ones_like(z))
    u = camera.fx * pc[..., 0] / safe + camera.cx
    v = camera.fy * pc[..., 1] / safe + camera.cy
    return u, v, z, valid


def backproject(camera, u, v, depth):
    """Pixel coordinates plus depth -> world points ``(..., 3)``."""
    rot, trans = camera.torch(depth.dtype, depth.device)
    x = (u - camera.cx) / camera.fx * depth
    y = (v - camera.cy) / camera.fy * depth
    pc = torch.stack([x, y, depth], dim=-1)
    return (pc - trans) @ rot


def denormalize_depth(s, near, far):
    """Normalized inverse depth -> metric depth; ``s=0`` is the far bound, ``s=1`` the near bound."""
    return 1.0 / (1.0 / far + s * (1.0 / near - 1.0 / far))


def normalize_inverse_depth(depth, near, far):
    return (1.0 / depth - 1.0 / far) / (1.0 / near - 1.0 / far)


def depth_candidates(near, far, count, dtype=torch.float64):
    """``count`` depths uniformly spaced in inverse depth, from far to near inclusive."""
    s = torch.linspace(0.0, 1.0, count, dtype=dtype)
    return denormalize_depth(s, near, far)


def warp_to_reference(source_feature, reference_depth, ref_camera, src_camera):
    """Pull ``source_feature`` ``(C, H, W)`` into the reference view.

    ``reference_depth`` is metric, ``(H, W)`` or ``(B, H, W)`` for a batch of
    depth hypotheses. Returns ``(warped, valid)`` with ``warped`` shaped
    ``(C, H, W)`` / ``(B, C, H, W)``; invalid samples are zeroed.
    """
    depth = _metric(reference_depth)
    batched = depth.dim() == 3
    if not batched:
        depth = depth[None]
    b, h, w = depth.shape
    u, v = pixel_grid(h, w, depth.dtype, depth.device)
    world = backproject(ref_camera, u.expand(b, h, w), v.expand(b, h, w), depth)
    us, vs, _, front = project(src_camera, world)
    src = source_feature[None].expand(b, *source_feature.shape)
    sampled, inside = bilinear_sample(src, us, vs)
    valid = inside & front
    warped = sampled * valid[:, None].to(sampled.dtype)
    if not batched:
        return warped[0], valid[0]
    return warped, valid


def aligned_feature(features, depths, cameras):
    """Mean of valid warped source features for every reference view.

    ``features`` ``(N, C, H, W)``, ``depths`` metric ``(N, H, W)``. Returns
    ``(aligned, counts)``; pixels with no valid source get zeros and count 0.
    """
    depths = _metric(depths)
    n = features.shape[0]
    out, counts = [], []
    for r in range(n):
        acc = torch.zeros_like(features[r])
        cnt = torch.zeros_like(depths[r])
        for s in range(n):
            if s == r:
                continue
            warped, valid = warp_to_reference(features[s], depths[r], cameras[r], cameras[s])
            acc = acc + warped
            cnt = cnt + valid.to(cnt.dtype)
        out.append(acc / cnt.clamp(min=1.0))
        counts.append(cnt)
    return torch.stack(out), torch.stack(counts)
