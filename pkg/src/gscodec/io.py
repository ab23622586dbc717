"""File formats around the pipeline: binary PPM images, camera text files,
scene bundle directories and PLY export of Gaussian sets."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import Camera

CAMERA_FILE = "cameras.txt"


def write_ppm(path, image):
    """``image`` ``(3, H, W)`` in [0, 1] -> 8-bit binary PPM."""
    arr = torch.as_tensor(image).detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


def _tokens(data, count, pos):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(data[start:pos])
    return out, pos + 1  # exactly one whitespace byte after maxval


def read_ppm(path):
    """Binary PPM (P6, maxval 255) -> float tensor ``(3, H, W)`` in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    if len(data) - pos < need:
        raise ValueError(f"{path}: expected {need} pixel bytes, got {len(data) - pos}")
    arr = np.frombuffer(data, np.uint8, need, pos).reshape(h, w, 3)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def format_camera(cam):
    vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.rotation.reshape(-1), *cam.translation, cam.near, cam.far]
    return " ".join(repr(float(v)) for v in vals)


def parse_camera(line):
    vals = [float(x) for x in line.split()]
    if len(vals) != 18:
        raise ValueError(f"camera line needs 18 numbers, got {len(vals)}")
    return Camera(*vals[:4], np.array(vals[4:13]).reshape(3, 3), np.array(vals[13:16]), vals[16], vals[17])


def write_cameras(path, cameras):
    Path(path).write_text("".join(format_camera(c) + "\n" for c in cameras))


def read_cameras(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    return [parse_camera(ln) for ln in lines]


@dataclass
class SceneBundle:
    images: torch.Tensor  # (N, 3, H, W)
    cameras: list
    depths: torch.Tensor = None  # (N, H, W) or None


def save_bundle(directory, images, cameras, depths=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_ppm(d / f"view{i:02d}.ppm", img)
    write_cameras(d / CAMERA_FILE, cameras)
    if depths is not None:
        for i, dep in enumerate(depths):
            np.save(d / f"depth{i:02d}.npy", torch.as_tensor(dep).detach().cpu().numpy())


def load_bundle(directory):
    d = Path(directory)
    if not (d / CAMERA_FILE).exists():
        raise FileNotFoundError(f"{d}: no {CAMERA_FILE}")
    cameras = read_cameras(d / CAMERA_FILE)
    paths = sorted(d.glob("view*.ppm"))
    if len(paths) != len(cameras):
        raise ValueError(f"{d}: {len(paths)} images but {len(cameras)} cameras")
    images = [read_ppm(p) for p in paths]
    if len({tuple(im.shape) for im in images}) != 1:
        raise ValueError(f"{d}: images differ in size")
    depth_paths = sorted(d.glob("depth*.npy"))
    depths = torch.stack([torch.from_numpy(np.load(p)) for p in depth_paths]) if depth_paths else None
    return SceneBundle(torch.stack(images), cameras, depths)


SH_C0 = 0.28209479177387814


def write_ply(path, gaussians):
    """Binary little-endian PLY with the usual splatting attribute names.

    Colors go to ``f_dc_*`` (degree-0 spherical harmonics), opacity and scales
    are stored pre-activation (logit, log) as viewers expect.
    """
    g = gaussians
    centers = g.centers.detach().double().numpy()
    colors = (g.colors.detach().double().numpy() - 0.5) / SH_C0
    op = g.opacities.detach().double().clamp(1e-6, 1 - 1e-6).numpy()
    cols = [centers, np.zeros_like(centers), colors, np.log(op / (1 - op))[:, None],
            np.log(g.scales.detach().double().clamp(min=1e-12).numpy()), g.rotations.detach().double().numpy()]
    table = np.concatenate(cols, axis=1).astype("<f4")
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(table)}"]
    header += [f"property float {n}" for n in names] + ["end_header"]
    Path(path).write_bytes(("\n".join(header) + "\n").encode() + table.tobytes())
    return names


def read_ply(path):
    """Minimal reader for files written by :func:`write_ply`: ``(names, (G, K) float32)``."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode().splitlines()
    count = next(int(ln.split()[-1]) for ln in lines if ln.startswith("element vertex"))
    names = [ln.split()[-1] for ln in lines if ln.startswith("property")]
    table = np.frombuffer(data, "<f4", count * len(names), end).reshape(count, len(names))
    return names, table

