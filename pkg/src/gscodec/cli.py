"""Command-line front end: ``gscodec encode|decode|train|eval-rd|gen-synthetic|inspect``.

Exit codes: 0 success, 2 usage error, 3 bad input (bitstream, checkpoint,
config, bundle), 1 anything else.
"""

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import torch

from . import coder
from .codec import LAMBDA_MAX, LAMBDA_MIN
from .gaussians import render
from .io import CAMERA_FILE, load_bundle, read_cameras, save_bundle, write_cameras, write_ply, write_ppm
from .model import SceneModel
from .tensors import CheckpointError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INPUT = 0, 1, 2, 3
BENCH_RUNS = 3


class InputError(Exception):
    pass


def _emit(args, payload, lines):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for ln in lines:
            print(ln)


def _timed(fn, bench):
    """Run ``fn`` once, or ``BENCH_RUNS`` times with median timings in bench mode."""
    runs = [fn() for _ in range(BENCH_RUNS if bench else 1)]
    result, timing = runs[-1]
    timing = {k: statistics.median(r[1][k] for r in runs) for k in timing}
    return result, timing


def _load_model(path):
    if not path:
        raise InputError("--checkpoint is required")
    if not Path(path).exists():
        raise InputError(f"checkpoint not found: {path}")
    model, meta = SceneModel.load(path)
    model.eval()
    return model, meta


# --- commands ----------------------------------------------------------------

def cmd_encode(args):
    bundle = load_bundle(args.scene)
    model, _ = _load_model(args.checkpoint)

    def once():
        data, report = model.compress(bundle.images, bundle.cameras, args.lam)
        return (data, report), {"generation": report["time_generation"],
                                "compression": report["time_compression"]}
    (data, report), timing = _timed(once, args.bench)
    out = Path(args.out)
    out.write_bytes(data)
    size = out.stat().st_size
    payload = {"out": str(out), "bytes": size, "lambda": report["lambda"],
               "stream_bytes": report["stream_bytes"],
               "estimated_bytes": [[b / 8 for b in v] for v in report["estimated_bits"]],
               "time": timing}
    _emit(args, payload, [
        f"wrote {out} ({size} bytes, lambda {report['lambda']:g})",
        f"streams: {report['stream_bytes']}",
        f"time: generation {timing['generation']:.3f}s, compression {timing['compression']:.3f}s",
    ])
    return EXIT_OK


def cmd_decode(args):
    model, _ = _load_model(args.checkpoint)
    data = Path(args.input).read_bytes()

    def once():
        t0 = time.perf_counter()
        cams, lam, _, gaussians, size = model.decompress(data)
        t1 = time.perf_counter()
        targets = read_cameras(args.target) if args.target else cams
        images = [render(gaussians, c, *size).clamp(0, 1) for c in targets]
        t2 = time.perf_counter()
        return (cams, lam, gaussians, targets, images), {"decompression": t1 - t0, "render": t2 - t1}
    (cams, lam, gaussians, targets, images), timing = _timed(once, args.bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(images):
        path = out / f"render{i:02d}.ppm"
        write_ppm(path, img)
        written.append(str(path))
    write_cameras(out / CAMERA_FILE, targets)
    if args.ply:
        write_ply(out / "gaussians.ply", gaussians)
        written.append(str(out / "gaussians.ply"))
    payload = {"renders": written, "primitives": len(gaussians), "lambda": lam, "time": timing}
    _emit(args, payload, [
        f"decoded {len(gaussians)} primitives at lambda {lam:g}",
        *[f"wrote {p}" for p in written],
        f"time: decompression {timing['decompression']:.3f}s, render {timing['render']:.3f}s",
    ])
    return EXIT_OK


def _config(args):
    from .training import TrainingConfig, read_config
    if not args.config:
        raise InputError("--config is required")
    d = read_config(args.config)
    for key in ("stage", "init", "seed", "out"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return TrainingConfig.from_dict(d)


def cmd_train(args):
    from .training import train
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    cfg = _config(args)
    if not cfg.out:
        raise InputError("no output checkpoint: set out in the config or pass --out")
    t0 = time.perf_counter()
    _, history = train(cfg)
    tail = history[-min(len(history), 100):]
    final = sum(r["loss"] for r in tail) / max(len(tail), 1)
    payload = {"checkpoint": cfg.out, "stage": cfg.stage, "steps": cfg.steps,
               "final_loss": final, "seconds": time.perf_counter() - t0}
    _emit(args, payload, [f"stage {cfg.stage}: {cfg.steps} steps, final loss {final:.5f}, saved {cfg.out}"])
    return EXIT_OK


def cmd_eval_rd(args):
    from .training import LAMBDA_GRID, eval_rd, scene_sets, write_csv
    cfg = _config(argparse.Namespace(config=args.config))
    model, _ = _load_model(args.checkpoint or cfg.out)
    _, scenes = scene_sets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = eval_rd(model, scenes, LAMBDA_GRID, out / "streams")
    write_csv(rows, out / "rd.csv")
    _emit(args, {"csv": str(out / "rd.csv"), "rows": rows},
          [f"lambda {r['lambda']:>6g}  {r['bytes']:9.1f} B  {r['psnr']:6.2f} dB  ssim {r['ssim']:.4f}"
           for r in rows] + [f"wrote {out / 'rd.csv'}"])
    return EXIT_OK


def cmd_gen_synthetic(args):
    from .synthetic import generate_synthetic
    scenes = generate_synthetic(args.seed, args.count, args.views, args.height, args.width)
    out = Path(args.out)
    dirs = []
    for i, sc in enumerate(scenes):
        d = out / f"scene{i:03d}"
        save_bundle(d, sc.images, sc.cameras, torch.stack([v.depth for v in sc.views]))
        save_bundle(d / "target", sc.target.image[None], [sc.target.camera], sc.target.depth[None])
        dirs.append(str(d))
    _emit(args, {"scenes": dirs}, [f"wrote {len(dirs)} scenes under {out}"])
    return EXIT_OK


def cmd_inspect(args):
    data = Path(args.input).read_bytes()
    bs = coder.unpack(data)
    lay = coder.layout(data)
    payload = {
        "bytes": len(data),
        "header": {"magic": coder.MAGIC.decode(), "version": coder.VERSION, "lambda": bs.lam,
                   "views": len(bs.cameras), "levels": bs.num_levels, "height": bs.height, "width": bs.width},
        "layout": lay,
        "cameras": [{"intrinsics": list(c.intrinsics), "rotation": c.rotation.reshape(-1).tolist(),
                     "translation": c.translation.tolist(), "near": c.near, "far": c.far}
                    for c in bs.cameras],
    }
    lines = [
        f"{args.input}: {len(data)} bytes",
        f"header: version {coder.VERSION}, lambda {bs.lam:g}, {len(bs.cameras)} views x {bs.num_levels} levels, "
        f"{bs.height}x{bs.width}",
        f"layout: header {lay['header']} B, camera block {lay['camera_block']} B, streams {lay['streams']}",
    ]
    for i, c in enumerate(payload["cameras"]):
        lines.append(f"camera {i}: f=({c['intrinsics'][0]:.3f}, {c['intrinsics'][1]:.3f}) "
                     f"c=({c['intrinsics'][2]:.3f}, {c['intrinsics'][3]:.3f}) "
                     f"t={[round(x, 4) for x in c['translation']]} near {c['near']:g} far {c['far']:g}")
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        stats = model.stream_stats(data)
        for v, view in enumerate(stats):
            for lvl, st in enumerate(view):
                st["bits_per_symbol"] = 8 * st["bytes"] / st["symbols"]
                st["ideal_bytes"] = st["ideal_bits"] / 8
                lines.append(f"view {v} level {lvl}: {st['bytes']} B for {st['symbols']} symbols "
                             f"({st['bits_per_symbol']:.3f} bits/symbol, ideal {st['ideal_bytes']:.1f} B)")
        payload["stream_stats"] = stats
    total = lay["header"] + lay["camera_block"] + sum(map(sum, lay["streams"]))
    payload["total"] = total
    lines.append(f"total: {total} bytes")
    _emit(args, payload, lines)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _lambda(text):
    try:
        lam = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
        raise argparse.ArgumentTypeError(f"lambda {lam:g} outside [{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]")
    return lam


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--bench", action="store_true", help=f"median timing of {BENCH_RUNS} runs")

    p = argparse.ArgumentParser(prog="gscodec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode", parents=[common], help="scene bundle -> .csplat")
    s.add_argument("scene", help="bundle directory (view*.ppm + cameras.txt)")
    s.add_argument("--lambda", dest="lam", type=_lambda, required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("decode", parents=[common], help=".csplat -> rendered PPMs")
    s.add_argument("input")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--target", help="camera file of views to render (default: the context cameras)")
    s.add_argument("--out", required=True)
    s.add_argument("--ply", action="store_true", help="also export the Gaussians as PLY")
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("train", parents=[common], help="run one training stage")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", type=int)
    s.add_argument("--init", help="stage-1 checkpoint (stage 2)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval-rd", parents=[common], help="rate-distortion table on held-out scenes")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval_rd)

    s = sub.add_parser("gen-synthetic", parents=[common], help="write synthetic scene bundles")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=48)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_synthetic)

    s = sub.add_parser("inspect", parents=[common], help="dump a .csplat file")
    s.add_argument("input")
    s.add_argument("--checkpoint", help="adds per-stream symbol statistics")
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    from .training import ConfigError
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InputError, ConfigError, CheckpointError, coder.BitstreamError, coder.RangeCoderError,
            FileNotFoundError, ValueError) as exc:
        print(f"gscodec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
