"""Procedural scenes: textured planes ray-cast from a few nearby cameras,
with exact per-view depth."""

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Camera

NEAR = 1.0
FAR = 12.0


@dataclass
class ContextView:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    camera: Camera
    depth: torch.Tensor = None  # (H, W) metric ground truth, when known


@dataclass
class SyntheticScene:
    views: list  # context ContextView list
    target: ContextView

    @property
    def images(self):
        return torch.stack([v.image for v in self.views])

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    @property
    def depths(self):
        return torch.stack([v.depth for v in self.views])


class _Quad:
    def __init__(self, origin, axis_u, axis_v, half_u, half_v, texture):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.axis_u = np.asarray(axis_u, dtype=np.float64)
        self.axis_v = np.asarray(axis_v, dtype=np.float64)
        self.normal = np.cross(self.axis_u, self.axis_v)
        self.half_u, self.half_v = half_u, half_v
        self.texture = texture

    def intersect(self, eye, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - eye) @ self.normal) / denom
        hit = eye + t[..., None] * dirs
        rel = hit - self.origin
        s, r = rel @ self.axis_u, rel @ self.axis_v
        ok = (np.abs(denom) > 1e-9) & (t > 0) & (np.abs(s) <= self.half_u) & (np.abs(r) <= self.half_v)
        return np.where(ok, t, np.inf), s, r


def _texture(rng):
    base = rng.uniform(0.25, 0.75, 3)
    waves = []
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        waves.append((rng.uniform(2.0, 6.0), np.cos(theta), np.sin(theta),
                      rng.uniform(0, 2 * np.pi), rng.uniform(-0.18, 0.18, 3)))

    def shade(s, r):
        out = np.broadcast_to(base, s.shape + (3,)).copy()
        for freq, cu, cv, phase, amp in waves:
            out += np.sin(freq * (cu * s + cv * r) + phase)[..., None] * amp
        return np.clip(out, 0.0, 1.0)

    return shade


def _scene_quads(rng):
    wall_z = rng.uniform(7.0, 9.0)
    quads = [_Quad([0, 0, wall_z], [1, 0, 0], [0, 1, 0], np.inf, np.inf, _texture(rng))]
    if rng.random() < 0.7:
        floor_y = rng.uniform(1.0, 1.6)
        quads.append(_Quad([0, floor_y, 5.0], [1, 0, 0], [0, 0, 1], np.inf, 5.0, _texture(rng)))
    for _ in range(rng.integers(1, 4)):
        yaw = rng.uniform(-0.5, 0.5)
        axis_u = [np.cos(yaw), 0.0, np.sin(yaw)]
        center = [rng.uniform(-1.2, 1.2), rng.uniform(-0.7, 0.5), rng.uniform(2.5, 5.5)]
        quads.append(_Quad(center, axis_u, [0, 1, 0], rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.8),
                           _texture(rng)))
    return quads


def raycast(quads, camera, height, width):
    """Image ``(H, W, 3)`` and camera-frame depth ``(H, W)`` of the nearest surfaces."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    rays = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], -1)
    dirs = rays @ camera.rotation  # camera -> world, z-component of ray in camera frame is 1
    eye = camera.center
    depth = np.full((height, width), np.inf)
    image = np.zeros((height, width, 3))
    for quad in quads:
        t, s, r = quad.intersect(eye, dirs)
        closer = t < depth
        if closer.any():
            depth = np.where(closer, t, depth)
            image[closer] = quad.texture(s[closer], r[closer])
    return image, depth


def _camera(rng, x, height, width, look):
    focal = 0.85 * width
    eye = [x, rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)]
    return Camera.look_at(eye, look, focal, focal, (width - 1) / 2, (height - 1) / 2, NEAR, FAR)


def make_scene(rng, num_views=2, height=32, width=48, dtype=torch.float32):
    quads = _scene_quads(rng)
    baseline = rng.uniform(0.3, 0.6)
    look = [rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), 6.0]
    xs = np.linspace(-baseline / 2, baseline / 2, num_views) if num_views > 1 else [0.0]
    cams = [_camera(rng, x, height, width, look) for x in xs]
    target_cam = _camera(rng, rng.uniform(-0.4, 0.4) * baseline, height, width, look)

    def view(cam):
        img, depth = raycast(quads, cam, height, width)
        depth = np.clip(depth, NEAR, FAR)
        return ContextView(torch.tensor(img, dtype=dtype).permute(2, 0, 1).contiguous(), cam,
                           torch.tensor(depth, dtype=dtype))

    return SyntheticScene([view(c) for c in cams], view(target_cam))


def generate_synthetic(seed, count, num_views=2, height=32, width=48, dtype=torch.float32):
    """``count`` scenes, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    return [make_scene(rng, num_views, height, width, dtype) for _ in range(count)]
