"""Scene bitstream container (``.csplat``).

Layout, all little-endian::

    "CSPL" | version u8 | lambda f32 | levels u8
    camera block:  u32 length | raw-Deflate payload
    for each view, for each level (hyper first):  u32 length | range-coded payload

The camera payload before Deflate is ``H u16, W u16, N u8`` followed per view
by ``fx fy cx cy``, the row-major rotation, translation, near and far, all f32.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import BitstreamError

MAGIC = b"CSPL"
VERSION = 1
HEADER = struct.Struct("<4sBfB")
_CAM_HEAD = struct.Struct("<HHB")
_CAM_VIEW = struct.Struct("<18f")
_U32 = struct.Struct("<I")


def deflate(data, level=9):
    """Raw RFC 1951 Deflate."""
    comp = zlib.compressobj(level, zlib.DEFLATED, -15)
    return comp.compress(bytes(data)) + comp.flush()


def inflate(data):
    try:
        decomp = zlib.decompressobj(-15)
        out = decomp.decompress(bytes(data)) + decomp.flush()
    except zlib.error as exc:
        raise BitstreamError(f"malformed Deflate payload: {exc}") from exc
    if not decomp.eof or decomp.unused_data:
        raise BitstreamError("malformed Deflate payload: stream not terminated cleanly")
    return out


def deflate_roundtrip(data):
    return inflate(deflate(data))


@dataclass
class CameraRecord:
    """Plain camera fields as they travel in the bitstream."""

    intrinsics: tuple  # fx, fy, cx, cy
    rotation: np.ndarray  # 3x3 world-to-camera
    translation: np.ndarray  # 3
    near: float
    far: float


@dataclass
class SceneBitstream:
    height: int
    width: int
    lam: float
    cameras: list
    streams: list = field(default_factory=list)  # per view: list of per-level bytes

    @property
    def num_views(self):
        return len(self.cameras)

    @property
    def num_levels(self):
        return len(self.streams[0]) if self.streams else 0


def encode_cameras(height, width, cameras):
    if not 0 < len(cameras) < 256:
        raise BitstreamError(f"view count {len(cameras)} does not fit in u8")
    parts = [_CAM_HEAD.pack(height, width, len(cameras))]
    for cam in cameras:
        vals = list(cam.intrinsics) + list(np.asarray(cam.rotation, dtype=np.float64).reshape(9))
        vals += list(np.asarray(cam.translation, dtype=np.float64).reshape(3)) + [cam.near, cam.far]
        parts.append(_CAM_VIEW.pack(*vals))
    return b"".join(parts)


def decode_cameras(payload):
    if len(payload) < _CAM_HEAD.size:
        raise BitstreamError(f"camera block truncated: expected {_CAM_HEAD.size} bytes, got {len(payload)}")
    height, width, n = _CAM_HEAD.unpack_from(payload, 0)
    expected = _CAM_HEAD.size + n * _CAM_VIEW.size
    if len(payload) != expected:
        raise BitstreamError(f"camera block length mismatch: expected {expected} bytes, got {len(payload)}")
    cams = []
    for i in range(n):
        v = np.array(_CAM_VIEW.unpack_from(payload, _CAM_HEAD.size + i * _CAM_VIEW.size), dtype=np.float32)
        cams.append(CameraRecord(tuple(float(x) for x in v[:4]), v[4:13].reshape(3, 3).astype(np.float64),
                                 v[13:16].astype(np.float64), float(v[16]), float(v[17])))
    return height, width, cams


def pack(bitstream):
    """Serialize a :class:`SceneBitstream` to bytes."""
    levels = bitstream.num_levels
    if any(len(s) != levels for s in bitstream.streams):
        raise BitstreamError("every view must carry the same number of levels")
    if bitstream.streams and len(bitstream.streams) != bitstream.num_views:
        raise BitstreamError(f"{len(bitstream.streams)} feature streams for {bitstream.num_views} views")
    cam = deflate(encode_cameras(bitstream.height, bitstream.width, bitstream.cameras))
    parts = [HEADER.pack(MAGIC, VERSION, bitstream.lam, levels), _U32.pack(len(cam)), cam]
    for view in bitstream.streams:
        for payload in view:
            parts.append(_U32.pack(len(payload)))
            parts.append(bytes(payload))
    return b"".join(parts)


def _take(data, pos, size, what):
    if pos + size > len(data):
        raise BitstreamError(f"truncated {what}: expected {size} bytes at offset {pos}, "
                             f"only {len(data) - pos} available")
    return data[pos:pos + size], pos + size


def unpack(data):
    """Parse bytes produced by :func:`pack`; rejects bad magic, version or framing."""
    data = bytes(data)
    head, pos = _take(data, 0, HEADER.size, "header")
    magic, version, lam, levels = HEADER.unpack(head)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}, expected {VERSION}")
    raw, pos = _take(data, pos, 4, "camera block length")
    cam, pos = _take(data, pos, _U32.unpack(raw)[0], "camera block")
    height, width, cameras = decode_cameras(inflate(cam))
    streams = []
    for _ in cameras if levels else ():
        view = []
        for _ in range(levels):
            raw, pos = _take(data, pos, 4, "stream length")
            payload, pos = _take(data, pos, _U32.unpack(raw)[0], "feature stream")
            view.append(payload)
        streams.append(view)
    if pos != len(data):
        raise BitstreamError(f"{len(data) - pos} trailing bytes after declared streams")
    return SceneBitstream(height, width, float(lam), cameras, streams)


def layout(data):
    """Byte accounting of a packed stream: header, camera block, per-stream sizes."""
    bs = unpack(data)
    cam_len = _U32.unpack_from(data, HEADER.size)[0]
    return {
        "header": HEADER.size,
        "camera_block": 4 + cam_len,
        "streams": [[4 + len(p) for p in view] for view in bs.streams],
        "total": len(data),
    }


def naive_tensor_compress(tensor):
    """Store a tensor as Deflate-compressed float16 (ablation baseline)."""
    arr = np.ascontiguousarray(np.asarray(tensor, dtype="<f2"))
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + deflate(arr.tobytes())


def naive_tensor_decompress(data):
    ndim = data[0]
    shape = struct.unpack_from(f"<{ndim}I", data, 1)
    raw = inflate(data[1 + 4 * ndim:])
    expected = int(np.prod(shape)) * 2
    if len(raw) != expected:
        raise BitstreamError(f"tensor payload length mismatch: expected {expected}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f2").reshape(shape).copy()
