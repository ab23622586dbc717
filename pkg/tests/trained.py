"""Seeded two-stage desk-scale training run shared by the acceptance checks.

The run is cached under ``tests/.cache/<key>`` where the key hashes the run
settings and the source of every module that shapes training, so editing the
model retrains and re-running the suite does not.
"""

import hashlib
import json
import time
from pathlib import Path

import gscodec
from gscodec.model import SceneModel
from gscodec.training import (
    LAMBDA_GRID, TrainingConfig, eval_rd, evaluate_codec_free, evaluate_depth_agreement, prepare,
    scene_sets, train,
)

CACHE = Path(__file__).parent / ".cache"
STAGE1 = dict(stage=1, steps=2000, seed=0, lr=1e-4, schedule="constant")
STAGE2 = dict(stage=2, steps=5000, seed=0, lr=1e-4, beta=2e-4, schedule="constant")
SOURCES = ("backbone", "codec", "gaussians", "geometry", "model", "synthetic", "tensors", "training",
           "coder/rangecoder", "coder/bitstream", "coder/_rc_py")


def cache_key():
    h = hashlib.sha256(json.dumps([STAGE1, STAGE2], sort_keys=True).encode())
    root = Path(gscodec.__file__).parent
    for name in SOURCES:
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def run(directory):
    directory.mkdir(parents=True, exist_ok=True)
    s1, s2 = directory / "stage1.ckpt", directory / "stage2.ckpt"
    cfg1 = TrainingConfig(**STAGE1, out=str(s1), log_every=0)
    _, held_out = scene_sets(cfg1)
    t0 = time.perf_counter()
    init = prepare(cfg1)
    init_psnr, _ = evaluate_codec_free(init, held_out)
    model1, _ = train(cfg1, init)
    t1 = time.perf_counter()
    free_psnr, free_ssim = evaluate_codec_free(model1, held_out)
    cfg2 = TrainingConfig(**STAGE2, init=str(s1), out=str(s2), log_every=0)
    model2, _ = train(cfg2)
    t2 = time.perf_counter()
    rows = eval_rd(model2, held_out, LAMBDA_GRID)
    metrics = {
        "init_psnr": init_psnr, "stage1_psnr": free_psnr, "stage1_ssim": free_ssim,
        "codec_free_psnr": free_psnr, "rd": rows,
        "depth_agreement": evaluate_depth_agreement(model2, held_out),
        "seconds_stage1": t1 - t0, "seconds_stage2": t2 - t1,
    }
    (directory / "metrics.json").write_text(json.dumps(metrics, indent=1))
    return metrics


def load():
    """``(metrics, stage1 model, stage2 model)``; trains on a cold cache."""
    directory = CACHE / cache_key()
    if not (directory / "metrics.json").exists():
        run(directory)
    metrics = json.loads((directory / "metrics.json").read_text())
    m1, _ = SceneModel.load(directory / "stage1.ckpt")
    m2, _ = SceneModel.load(directory / "stage2.ckpt")
    return metrics, m1.eval(), m2.eval(), directory
