"""The full scene model: encoder side, feature codec, decoder side, and the
bitstream-level compress/decompress entry points."""

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import coder
from .backbone import FeatureHead, MultiViewEncoder, Refiner
from .codec import FeatureCodec, check_lambda, estimate_rate
from .gaussians import DepthHead, GaussianHead, map_2d_to_3d, metric_depth
from .geometry import Camera, normalize_inverse_depth
from .tensors import init_module, load_checkpoint, save_checkpoint

BACKBONE = ("encoder.", "feat_head.", "refine_pre.")
HEADS = ("depth_head.", "gs_head.")
CODEC = ("codec.", "refine_post.")
NUM_LEVELS = 2


@dataclass
class ModelConfig:
    c_mv: int = 32
    c_f: int = 32
    d_cand: int = 32
    c_z: int = 64
    c_h: int = 32
    embed_dim: int = 16
    hidden: int = 32

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def camera_record(cam):
    return coder.CameraRecord(cam.intrinsics, cam.rotation, cam.translation, cam.near, cam.far)


def camera_from_record(rec):
    return Camera(*rec.intrinsics, rec.rotation, rec.translation, rec.near, rec.far)


def check_resolution(height, width):
    if height % 16 or width % 16:
        raise ValueError(f"image size {height}x{width} must be a multiple of 16")


class SceneModel(nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.encoder = MultiViewEncoder(cfg.c_mv, cfg.d_cand)
        self.feat_head = FeatureHead(cfg.c_mv, cfg.d_cand, cfg.c_f)
        self.refine_pre = Refiner(cfg.c_f, cfg.hidden)
        self.codec = FeatureCodec(cfg.c_f, cfg.c_z, cfg.c_h, cfg.embed_dim)
        self.depth_head = DepthHead(cfg.c_f, cfg.hidden)
        self.refine_post = Refiner(cfg.c_f, cfg.hidden)
        self.gs_head = GaussianHead(cfg.c_f, cfg.hidden)
        init_module(self, torch.Generator().manual_seed(seed))
        self.encoder.reset_cost()
        self.refine_pre.reset_output()
        self.refine_post.reset_output()
        self.codec.shrink_synthesis()

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    # -- encoder side ----------------------------------------------------
    def encode_features(self, images, cameras):
        """``images`` ``(N, 3, H, W)`` -> dict with F_mv, D_enc, P_depth, F_g, F_c."""
        check_resolution(*images.shape[-2:])
        enc = self.encoder(images, cameras)
        f_g = self.feat_head(images, enc.features, enc.probs)
        f_c = self.refine_pre(f_g, enc.depth, cameras)
        return {"F_mv": enc.features, "D_enc": enc.depth, "P_depth": enc.probs, "F_g": f_g, "F_c": f_c}

    def gaussians(self, feature, depth, cameras):
        return map_2d_to_3d(depth, self.gs_head(feature, depth, cameras), cameras)

    def codec_free(self, images, cameras):
        """Stage-1 path: Gaussians from ``F_c`` and the encoder depth."""
        feats = self.encode_features(images, cameras)
        return self.gaussians(feats["F_c"], feats["D_enc"], cameras), feats

    # -- decoder side ----------------------------------------------------
    def decode_feature(self, f_hat, cameras):
        """Reconstructed feature -> ``(gaussians, S, D_hat)``; uses nothing but ``f_hat`` and cameras."""
        s = self.depth_head(f_hat)
        depth = metric_depth(s, cameras)
        f_dec = self.refine_post(f_hat, depth, cameras)
        return self.gaussians(f_dec, depth, cameras), s, depth

    # -- bitstream -------------------------------------------------------
    @torch.no_grad()
    def compress(self, images, cameras, lam):
        """Encode context views into packed bytes; returns ``(data, report)``."""
        lam = float(np.float32(check_lambda(lam)))
        t0 = time.perf_counter()
        feats = self.encode_features(images.to(self.dtype), cameras)
        t1 = time.perf_counter()
        streams, estimates = [], []
        for i in range(images.shape[0]):
            s, est = self.codec.compress(feats["F_c"][i:i + 1], lam)
            streams.append(s)
            estimates.append(est)
        h, w = images.shape[-2:]
        data = coder.pack(coder.SceneBitstream(h, w, lam, [camera_record(c) for c in cameras], streams))
        t2 = time.perf_counter()
        report = {"bytes": len(data), "lambda": lam, "estimated_bits": estimates,
                  "stream_bytes": [[len(p) for p in v] for v in streams],
                  "time_generation": t1 - t0, "time_compression": t2 - t1}
        return data, report

    @torch.no_grad()
    def decompress(self, data):
        """Packed bytes -> ``(cameras, lam, f_hat, gaussians, (height, width))``."""
        bs = coder.unpack(data)
        check_lambda(bs.lam)
        if bs.num_levels != NUM_LEVELS:
            raise coder.BitstreamError(f"expected {NUM_LEVELS} levels per view, got {bs.num_levels}")
        cameras = [camera_from_record(r) for r in bs.cameras]
        latent = (bs.height // 4, bs.width // 4)
        f_hat = torch.cat([self.codec.decompress(v, bs.lam, latent, self.dtype)[0] for v in bs.streams])
        gaussians, _, _ = self.decode_feature(f_hat, cameras)
        return cameras, bs.lam, f_hat, gaussians, (bs.height, bs.width)

    @torch.no_grad()
    def stream_stats(self, data):
        """Per view and level: ``{"bytes", "symbols", "ideal_bits"}`` of a packed file."""
        bs = coder.unpack(data)
        latent = (bs.height // 4, bs.width // 4)
        out = []
        for view in bs.streams:
            levels, dists = self.codec.decode_levels(view, bs.lam, latent, self.dtype)
            out.append([{"bytes": len(raw), "symbols": sym.numel(),
                         "ideal_bits": estimate_rate([sym.numpy()], [dist], self.codec.bound)}
                        for raw, sym, dist in zip(view, levels, dists)])
        return out

    # -- persistence -----------------------------------------------------
    def save(self, path, **meta):
        meta = dict(meta, model=asdict(self.config))
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path):
        state, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta.get("model", {})))
        model.load_state_dict(state)
        return model, meta


def encoder_inverse_depth(depth, cameras):
    near = depth.new_tensor([c.near for c in cameras])[:, None, None]
    far = depth.new_tensor([c.far for c in cameras])[:, None, None]
    return normalize_inverse_depth(depth, near, far)
