"""Two-stage optimization, loss assembly, lambda sampling and the rate-distortion
evaluation protocol."""

import csv
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .codec import LAMBDA_MAX, LAMBDA_MIN, check_lambda
from .gaussians import psnr, render, ssim
from .geometry import DepthMap, normalize_inverse_depth
from .model import BACKBONE, CODEC, HEADS, ModelConfig, SceneModel
from .synthetic import generate_synthetic
from .tensors import make_optimizer, set_trainable, trainable_parameters

log = logging.getLogger(__name__)

LAMBDA_GRID = (16, 32, 64, 128, 256, 512, 1024)


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    stage: int
    steps: int
    seed: int
    gamma: float = 0.1
    beta: float = 4e-4
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX
    lr: float = 1e-4
    weight_decay: float = 0.01
    train_scenes: int = 32
    eval_scenes: int = 8
    num_views: int = 2
    height: int = 32
    width: int = 48
    data_seed: int = 0
    init: str = ""
    out: str = ""
    log_every: int = 100
    schedule: str = "constant"

    REQUIRED = ("stage", "steps", "seed")

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be cosine or constant, got {self.schedule!r}")
        if self.stage == 2 and not self.init:
            raise ConfigError("stage 2 needs a stage-1 checkpoint (init)")
        if not LAMBDA_MIN <= self.lambda_min <= self.lambda_max <= LAMBDA_MAX:
            raise ConfigError(f"lambda range [{self.lambda_min}, {self.lambda_max}] outside "
                              f"[{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]")

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"missing config key(s): {', '.join(missing)}")
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(kinds) - set(ModelConfig.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        out = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            kind = {"int": int, "float": float, "str": str}.get(kinds[k], kinds[k])
            try:
                out[k] = kind(float(v)) if kind is int else kind(v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**out)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(read_config(path))


def read_config(path):
    """Flat ``key = value`` text file; ``#`` starts a comment."""
    d = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        d[k] = v
    return d


# --- losses -----------------------------------------------------------------

def render_loss(pred, target):
    return torch.mean((pred - target) ** 2)


def codec_depth_loss(s, s_enc):
    """Mean absolute difference of two normalized inverse-depth maps."""
    return torch.mean(torch.abs(s.require("normalized") - s_enc.require("normalized")))


def encoder_target(depth, cameras):
    near = depth.new_tensor([c.near for c in cameras])[:, None, None]
    far = depth.new_tensor([c.far for c in cameras])[:, None, None]
    return DepthMap(normalize_inverse_depth(depth, near, far), "normalized")


def rd_loss(lam, distortion, depth, rate_bits, pixels, gamma, beta, lambda_max=LAMBDA_MAX):
    """``(lam / lambda_max) * (distortion + gamma * depth) + beta * rate``; rate in bits per context pixel."""
    return (lam / lambda_max) * (distortion + gamma * depth) + beta * rate_bits / pixels


def sample_lambda(rng, low=LAMBDA_MIN, high=LAMBDA_MAX):
    """Log-uniform draw from ``[low, high]``."""
    return float(math.exp(rng.uniform(math.log(low), math.log(high))))


# --- steps ------------------------------------------------------------------

def stage1_step(model, optimizer, scene, gamma=0.1):
    """Codec bypassed: Gaussians from ``F_c`` and the encoder depth."""
    images, cams = scene.images.to(model.dtype), scene.cameras
    gaussians, feats = model.codec_free(images, cams)
    h, w = images.shape[-2:]
    pred = render(gaussians, scene.target.camera, h, w)
    distortion = render_loss(pred, scene.target.image.to(model.dtype))
    s = DepthMap(model.depth_head(feats["F_c"]), "normalized")
    s_enc = encoder_target(feats["D_enc"].detach(), cams)
    depth = codec_depth_loss(s, s_enc)
    loss = distortion + gamma * depth
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"loss": loss.item(), "distortion": distortion.item(), "depth": depth.item(),
            "render_depth": feats["D_enc"].detach()}


def stage2_step(model, optimizer, scene, lam, gamma=0.1, beta=4e-4, lambda_max=LAMBDA_MAX, generator=None):
    """Codec-stage update; the backbone runs without gradients."""
    images, cams = scene.images.to(model.dtype), scene.cameras
    with torch.no_grad():
        feats = model.encode_features(images, cams)
    f_hat, rate, _ = model.codec(feats["F_c"], lam, generator=generator)
    gaussians, s, _ = model.decode_feature(f_hat, cams)
    n, _, h, w = images.shape
    pred = render(gaussians, scene.target.camera, h, w)
    distortion = render_loss(pred, scene.target.image.to(model.dtype))
    depth = codec_depth_loss(DepthMap(s, "normalized"), encoder_target(feats["D_enc"], cams))
    loss = rd_loss(lam, distortion, depth, rate, n * h * w, gamma, beta, lambda_max)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"loss": loss.item(), "distortion": distortion.item(), "depth": depth.item(),
            "bpp": rate.item() / (n * h * w), "lambda": lam}


# --- loops ------------------------------------------------------------------

def scene_sets(cfg):
    """Train and held-out scenes; disjoint because they come from one seeded stream."""
    scenes = generate_synthetic(cfg.data_seed, cfg.train_scenes + cfg.eval_scenes,
                                cfg.num_views, cfg.height, cfg.width)
    return scenes[:cfg.train_scenes], scenes[cfg.train_scenes:]


@torch.no_grad()
def _train_features(model, cfg):
    return [model.encode_features(s.images.to(model.dtype), s.cameras)["F_c"] for s in scene_sets(cfg)[0]]


def prepare(cfg, model=None):
    """Model with the stage's parameter tags trainable and everything else frozen."""
    torch.manual_seed(cfg.seed)
    if model is None:
        if cfg.stage == 1:
            model = SceneModel(seed=cfg.seed)
        else:
            if not cfg.init or not Path(cfg.init).exists():
                raise ConfigError(f"stage-1 checkpoint not found: {cfg.init!r}")
            model, meta = SceneModel.load(cfg.init)
            if meta.get("stage") == 1:
                model.codec.center_on(torch.cat([f for f in _train_features(model, cfg)]))
    set_trainable(model, BACKBONE + HEADS + CODEC, False)
    set_trainable(model, BACKBONE + HEADS if cfg.stage == 1 else CODEC + HEADS, True)
    return model


def train(cfg, model=None, scenes=None, callback=None):
    """Run ``cfg.steps`` steps of the configured stage; returns ``(model, history)``."""
    model = prepare(cfg, model)
    train_set = scenes if scenes is not None else scene_sets(cfg)[0]
    opt = make_optimizer(trainable_parameters(model), cfg.lr, cfg.weight_decay)
    sched = None
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda k: 0.5 * (1.0 + math.cos(math.pi * min(k, cfg.steps) / max(cfg.steps, 1))))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    t0 = time.perf_counter()
    model.train()
    for step in range(cfg.steps):
        scene = train_set[rng.integers(len(train_set))]
        if cfg.stage == 1:
            rec = stage1_step(model, opt, scene, cfg.gamma)
            rec.pop("render_depth")
        else:
            lam = sample_lambda(rng, cfg.lambda_min, cfg.lambda_max)
            rec = stage2_step(model, opt, scene, lam, cfg.gamma, cfg.beta, cfg.lambda_max, gen)
        if sched is not None:
            sched.step()
        rec["step"] = step
        history.append(rec)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = history[-cfg.log_every:]
            log.info("stage %d step %d loss %.5f mse %.5f (%.1fs)", cfg.stage, step + 1,
                     np.mean([r["loss"] for r in recent]), np.mean([r["distortion"] for r in recent]),
                     time.perf_counter() - t0)
        if callback is not None:
            callback(step, rec)
    model.eval()
    if cfg.out:
        model.save(cfg.out, stage=cfg.stage, steps=cfg.steps, seed=cfg.seed)
    return model, history


# --- evaluation -------------------------------------------------------------

@torch.no_grad()
def evaluate_codec_free(model, scenes):
    """Mean target-view (PSNR, SSIM) of the stage-1 path."""
    scores = []
    for sc in scenes:
        g, _ = model.codec_free(sc.images.to(model.dtype), sc.cameras)
        img = render(g, sc.target.camera, *sc.images.shape[-2:]).clamp(0, 1)
        scores.append((psnr(img, sc.target.image), ssim(img, sc.target.image)))
    return tuple(float(x) for x in np.mean(scores, axis=0))


@torch.no_grad()
def evaluate_depth_agreement(model, scenes, lam=LAMBDA_MAX):
    """Mean |S - S_enc| of the decoder's depth on decoded features."""
    errs = []
    for sc in scenes:
        images = sc.images.to(model.dtype)
        feats = model.encode_features(images, sc.cameras)
        data, _ = model.compress(images, sc.cameras, lam)
        _, _, f_hat, _, _ = model.decompress(data)
        s = model.depth_head(f_hat)
        errs.append(codec_depth_loss(DepthMap(s, "normalized"), encoder_target(feats["D_enc"], sc.cameras)).item())
    return float(np.mean(errs))


@torch.no_grad()
def eval_rd(model, scenes, lambdas=LAMBDA_GRID, out_dir=None):
    """One row per lambda: mean packed bytes per scene, PSNR and SSIM of decoded renders.

    Sizes are file lengths of the written ``.csplat`` files when ``out_dir`` is
    given, else lengths of the packed byte strings.
    """
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in lambdas:
        lam = check_lambda(lam)
        sizes, ps, ss, est = [], [], [], []
        for i, sc in enumerate(scenes):
            data, report = model.compress(sc.images.to(model.dtype), sc.cameras, lam)
            if out_dir:
                path = out_dir / f"scene{i:03d}_lambda{lam:g}.csplat"
                path.write_bytes(data)
                data = path.read_bytes()
                sizes.append(path.stat().st_size)
            else:
                sizes.append(len(data))
            est.append(sum(sum(v) for v in report["estimated_bits"]) / 8)
            _, _, _, g, (h, w) = model.decompress(data)
            img = render(g, sc.target.camera, h, w).clamp(0, 1)
            ps.append(psnr(img, sc.target.image))
            ss.append(ssim(img, sc.target.image))
        rows.append({"lambda": lam, "bytes": float(np.mean(sizes)), "psnr": float(np.mean(ps)),
                     "ssim": float(np.mean(ss)), "estimated_bytes": float(np.mean(est))})
    return rows


RD_FIELDS = ("lambda", "bytes", "psnr", "ssim", "estimated_bytes")


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RD_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RD_FIELDS})


def monotonicity_violations(rows):
    """Adjacent-lambda pairs where rate drops or PSNR drops as lambda grows."""
    rows = sorted(rows, key=lambda r: r["lambda"])
    bad = []
    for a, b in zip(rows, rows[1:]):
        if b["bytes"] < a["bytes"]:
            bad.append(("bytes", a["lambda"], b["lambda"]))
        if b["psnr"] < a["psnr"]:
            bad.append(("psnr", a["lambda"], b["lambda"]))
    return bad
