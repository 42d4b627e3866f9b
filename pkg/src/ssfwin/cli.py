"""Command-line interface.

Subcommands: train, compress, decompress, eval, sweep-gop,
analyze-latents, baselines, inspect. Exit codes: 0 success, 1 usage
error, 2 runtime error. The coder backend is selected with
SSFW_CODER_BACKEND={reference,native,auto} or --backend.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data_model import Clip, Frame, ModelConfig, PAPER_LAMBDAS

__all__ = ["main"]


class _UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _config_from_args(args) -> ModelConfig:
    if getattr(args, "config", None):
        cfg = ModelConfig.from_json(Path(args.config).read_text())
    else:
        preset = getattr(args, "preset", "desk")
        cfg = {"desk": ModelConfig.desk, "mini": ModelConfig.mini, "full": ModelConfig.full}[preset]()
    return cfg


def _load_model(path: str, force: bool = False):
    from .training import load_checkpoint

    model, blob = load_checkpoint(path, force=force)
    return model


def _input_clip(args, min_frames: int = 1) -> Clip:
    from .dataset import ClipSource, load_clips, make_synthetic_clip

    if args.synthetic:
        return make_synthetic_clip(
            seed=args.seed, n_frames=args.frames, h=args.size, w=args.size,
            motion=args.motion,
        )
    source = ClipSource(kind="directory_archive", root=args.input,
                        clip_length=args.frames, seed=args.seed)
    for clip in load_clips(source):
        return clip
    raise RuntimeError(f"no usable clip of {args.frames} frames under {args.input}")


def _add_io_args(p, with_synthetic=True):
    p.add_argument("--in", dest="input", help="input directory of grayscale images")
    if with_synthetic:
        p.add_argument("--synthetic", action="store_true",
                       help="use the built-in synthetic clip generator")
        p.add_argument("--motion", default="translate",
                       choices=["translate", "rotate", "brighten"])
        p.add_argument("--size", type=int, default=64, help="synthetic frame side")
    p.add_argument("--frames", type=int, default=30, help="number of frames to read")
    p.add_argument("--seed", type=int, default=0)


def _cmd_train(args) -> int:
    from .dataset import ClipSource
    from .plotting import training_curve_figure
    from .training import TrainPlan, train

    cfg = _config_from_args(args)
    plan = TrainPlan(
        lambda_rd=args.lambda_rd, steps=args.steps, batch_size=args.batch,
        crop=args.crop, clip_length=args.clip_length, seed=args.seed, config=cfg,
    )
    if args.synthetic or not args.input:
        source = ClipSource(kind="synthetic", seed=args.seed, clip_length=args.clip_length,
                            frame_size=max(args.crop, 64), motion=args.motion,
                            n_clips=args.pool_clips)
    else:
        source = ClipSource(kind="directory_archive", root=args.input,
                            clip_length=args.clip_length, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl" if args.metrics else None
    result = train(plan, source, out_dir=out_dir, metrics_path=metrics_path)
    print(f"checkpoint: {result.checkpoint_path}")
    losses = [m["loss"] for m in result.metrics if "loss" in m]
    if losses:
        print(f"final loss {losses[-1]:.5f} (initial {losses[0]:.5f})")
    if args.plot:
        fig = training_curve_figure(result.metrics, out_dir / "training.png")
        print(f"figure: {fig}")
    return 0


def _cmd_compress(args) -> int:
    from .evaluation import psnr
    from .video_codec import encode_gop

    model = _load_model(args.weights, force=args.force)
    clip = _input_clip(args)
    frames = clip.frames
    gops = [Clip(frames=frames[i:i + args.gop]) for i in range(0, len(frames), args.gop)]

    def code(chunk):
        return encode_gop(model, chunk, backend=args.backend)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(code, gops))
    else:
        results = [code(c) for c in gops]
    blob = b"".join(container.serialize() for container, _ in results)
    Path(args.out).write_bytes(blob)
    n_px = len(frames) * clip.height * clip.width
    all_psnr = [
        psnr(f.pixels, r[0, 0].numpy())
        for (container, recons), chunk in zip(results, gops)
        for f, r in zip(chunk.frames, recons)
    ]
    print(f"wrote {args.out}: {len(blob)} bytes, {len(gops)} GoP(s), "
          f"bpp {8 * len(blob) / n_px:.4f}, mean PSNR {np.mean(all_psnr):.2f} dB")
    return 0


def _cmd_decompress(args) -> int:
    from .video_codec import decode_gop, parse_containers

    model = _load_model(args.weights, force=args.force)
    blob = Path(args.input).read_bytes()
    containers = parse_containers(blob)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = 0
    n_px = 0
    for container in containers:
        clip, _ = decode_gop(model, container, backend=args.backend, force=args.force)
        n_px += container.n_frames * container.height * container.width
        for frame in clip.frames:
            from PIL import Image

            arr = np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out_dir / f"frame_{idx:05d}.png")
            idx += 1
    print(f"decoded {idx} frame(s) to {out_dir}, bpp {8 * len(blob) / n_px:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import encode_sequence, write_records
    from .plotting import rd_curve_figure

    clip = _input_clip(args)
    records = []
    points = []
    for wpath in args.weights:
        model = _load_model(wpath, force=args.force)
        point, _ = encode_sequence(model, clip, args.gop, backend=args.backend)
        points.append(point)
        rec = {
            "weights": str(wpath),
            "config_hash": model.config.config_hash().hex(),
            "lambda": model.config.lambda_rd,
            "gop": args.gop,
            "bpp": point.bpp,
            "psnr_db": point.psnr_db,
            "msssim_log_db": point.msssim_log_db,
        }
        records.append(rec)
        print(json.dumps(rec))
    if args.records:
        write_records(args.records, records)
    if args.plot:
        fig = rd_curve_figure({"model": points}, args.plot)
        print(f"figure: {fig}")
    return 0


def _cmd_sweep_gop(args) -> int:
    from .evaluation import gop_sweep, write_records
    from .plotting import gop_sweep_figure

    models = [_load_model(w, force=args.force) for w in args.weights]
    clip = _input_clip(args)
    rows = gop_sweep(models, clip, args.gops, backend=args.backend)
    for row in rows:
        print(json.dumps(row))
    if args.records:
        write_records(args.records, rows)
    if args.plot:
        fig = gop_sweep_figure(rows, args.plot)
        print(f"figure: {fig}")
    return 0


def _cmd_analyze_latents(args) -> int:
    from .evaluation import latent_correlation, write_records
    from .plotting import ncc_map_figure

    clip = _input_clip(args)
    maps = {}
    records = []
    for wpath in args.weights:
        model = _load_model(wpath, force=args.force)
        m, scalar = latent_correlation(model, clip)
        label = f"{model.config.transform_kind} (lambda={model.config.lambda_rd:g})"
        maps[label] = m
        rec = {
            "weights": str(wpath),
            "config_hash": model.config.config_hash().hex(),
            "transform": model.config.transform_kind,
            "mean_abs_ncc": scalar,
            "ncc_map": [[float(v) for v in row] for row in m],
        }
        records.append(rec)
        print(f"{label}: mean |NCC| = {scalar:.4f}")
    if args.records:
        write_records(args.records, records)
    if args.plot:
        fig = ncc_map_figure(maps, args.plot)
        print(f"figure: {fig}")
    return 0


def _cmd_baselines(args) -> int:
    from .evaluation import run_baseline, vtm_command, write_records

    if args.show_vtm_command:
        print(vtm_command())
        return 0
    clip = _input_clip(args)
    records = []
    for codec in args.codecs:
        for q in args.qs:
            result = run_baseline(codec, clip, q, gop=args.gop)
            rec = {"codec": codec, "q": q, "gop": args.gop, "status": result.status,
                   "command": result.command}
            if result.rd is not None:
                rec.update(bpp=result.rd.bpp, psnr_db=result.rd.psnr_db,
                           msssim_log_db=result.rd.msssim_log_db)
            if result.detail:
                rec["detail"] = result.detail
            records.append(rec)
            print(json.dumps(rec))
    if args.records:
        write_records(args.records, records)
    return 0


def _cmd_inspect(args) -> int:
    from .video_codec import parse_containers

    blob = Path(args.input).read_bytes()
    containers = parse_containers(blob)
    total = 0
    for gi, container in enumerate(containers):
        print(f"GoP {gi}: {container.n_frames} frames, {container.height}x{container.width}, "
              f"config {container.config_hash.hex()[:16]}")
        for row in container.section_sizes():
            print(f"  frame {row['frame']:3d} [{row['type']}] "
                  f"substreams {row['substreams']:2d} payload {row['payload_bytes']:7d} B "
                  f"section {row['section_bytes']:7d} B")
        total += container.serialized_bytes
    print(f"total {total} bytes in {len(containers)} container(s); file {len(blob)} bytes")
    if total != len(blob):
        raise RuntimeError("container accounting does not match the file size")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ssfwin", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ssfwin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="RD-train a model")
    p.add_argument("--lambda", dest="lambda_rd", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--clip-length", type=int, default=4)
    p.add_argument("--pool-clips", type=int, default=48)
    p.add_argument("--preset", default="desk", choices=["desk", "mini", "full"])
    p.add_argument("--config", help="JSON model config file (overrides --preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", action=argparse.BooleanOptionalAction, default=True,
                   help="write metrics.jsonl next to the checkpoint")
    p.add_argument("--plot", action="store_true", help="render training curves")
    _add_io_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compress", help="encode frames to a .ssfw file")
    p.add_argument("--weights", required=True)
    p.add_argument("--gop", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--backend", choices=["reference", "native", "auto"])
    p.add_argument("--force", action="store_true")
    _add_io_args(p)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("decompress", help="decode a .ssfw file to PNG frames")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=["reference", "native", "auto"])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_decompress)

    p = sub.add_parser("eval", help="RD points for one or more checkpoints")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--gop", type=int, default=4)
    p.add_argument("--records", help="JSONL output path")
    p.add_argument("--plot", help="PNG figure path")
    p.add_argument("--backend", choices=["reference", "native", "auto"])
    p.add_argument("--force", action="store_true")
    _add_io_args(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-gop", help="bitrate saving vs all-intra per GoP size")
    p.add_argument("--weights", nargs="+", required=True,
                   help="rate ladder: one checkpoint per lambda")
    p.add_argument("--gops", nargs="+", type=int, default=[1, 2, 4])
    p.add_argument("--records")
    p.add_argument("--plot")
    p.add_argument("--backend", choices=["reference", "native", "auto"])
    p.add_argument("--force", action="store_true")
    _add_io_args(p)
    p.set_defaults(func=_cmd_sweep_gop)

    p = sub.add_parser("analyze-latents", help="latent spatial-correlation analysis")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--records")
    p.add_argument("--plot")
    p.add_argument("--force", action="store_true")
    _add_io_args(p)
    p.set_defaults(func=_cmd_analyze_latents)

    p = sub.add_parser("baselines", help="traditional-codec RD points via ffmpeg")
    p.add_argument("--codecs", nargs="+", default=["h264", "h265"],
                   choices=["h264", "h265"])
    p.add_argument("--qs", nargs="+", type=int, default=[9, 12, 15, 19, 23, 27, 30])
    p.add_argument("--gop", type=int, default=30)
    p.add_argument("--records")
    p.add_argument("--show-vtm-command", action="store_true",
                   help="print the documented VTM invocation and exit")
    _add_io_args(p)
    p.set_defaults(func=_cmd_baselines)

    p = sub.add_parser("inspect", help="per-section byte table of a .ssfw file")
    p.add_argument("input")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure -> exit 2 with a message
        sys.stderr.write(f"ssfwin: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
