"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _set_threads(k: int) -> None:
    from threadpoolctl import threadpool_limits

    # the compiled scan kernels are single-threaded; k only affects BLAS
    threadpool_limits(k)


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_FLAGS = {
    "scale": int, "channels": int, "rscfl_count": int, "alpha": float, "variant": str, "fusion_after": int,
    "d_state": int, "steps": int, "lr": float, "batch_size": int, "seed": int, "dtype": str,
    "probe_every": int, "checkpoint_every": int, "manifest": str, "out_dir": str, "probe": str, "resume": str,
}


def cmd_train(args) -> int:
    from .config import format_config, load_config
    from .data import load_image, read_manifest
    from .training import NumericAbort, train_loop

    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    overrides["share_stages"] = args.share_stages
    overrides["threads"] = args.threads
    cfg = load_config(args.config, overrides)
    if cfg.manifest is None:
        raise UsageError("no manifest given (set 'manifest' in the config or pass --manifest)")
    images = [load_image(p) for p in read_manifest(cfg.manifest)]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise UsageError(f"training images must share one size, found {sorted(shapes)}")
    probe = load_image(cfg.probe) if cfg.probe else None
    out = _ensure_dir(cfg.out_dir)
    (out / "config.txt").write_text(format_config(cfg))
    _set_threads(cfg.threads)
    try:
        result = train_loop(images, cfg.pipeline(), cfg.training(), out_dir=out, probe=probe,
                            resume=cfg.resume, log=sys.stdout if args.verbose else None)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}; batch dumped to {exc.dump}", file=sys.stderr)
        return EXIT_NUMERIC
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"finished step {last.step}, loss {last.loss:.6g}; checkpoint {result.checkpoint}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# superresolve / eval
# ---------------------------------------------------------------------------

def _load_checked(checkpoint, scale: Optional[int], channels: Optional[int]):
    from .autodiff import CheckpointError
    from .training import load_model

    try:
        model, pipeline, meta = load_model(checkpoint)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    if scale is not None and scale != pipeline.scale:
        raise UsageError(f"checkpoint was trained for scale {pipeline.scale}, not {scale}")
    if channels is not None and channels != pipeline.channels:
        raise UsageError(f"checkpoint has {pipeline.channels} channels, not {channels}")
    return model, pipeline


def error_map(sr: np.ndarray, hr: np.ndarray) -> tuple:
    """|SR - HR| stretched to full range; returns ``(image, stretch_factor)``."""
    diff = np.abs(sr - hr)
    peak = float(diff.max())
    factor = 1.0 / peak if peak > 0 else 1.0
    return np.clip(diff * factor, 0.0, 1.0), factor


def cmd_superresolve(args) -> int:
    from .data import decode_pgm, encode_pgm, load_image, save_image
    from .metrics import format_db, psnr, ssim
    from .training import superresolve

    model, pipeline = _load_checked(args.checkpoint, args.scale, args.channels)
    lr = load_image(args.input)
    out = _ensure_dir(args.out_dir)
    sr = np.clip(superresolve(model, lr), 0.0, 1.0)
    target = out / (args.output_name or f"{Path(args.input).stem}_x{pipeline.scale}.pgm")
    save_image(target, sr, bits=args.bits)
    # compare what was actually written, so a reference equal to the file scores exactly
    sr = decode_pgm(encode_pgm(sr, bits=args.bits))
    print(f"wrote {target} ({sr.shape[1]}x{sr.shape[0]})")
    if args.reference:
        hr = load_image(args.reference)
        if hr.shape != sr.shape:
            raise UsageError(f"reference is {hr.shape[1]}x{hr.shape[0]}, output is {sr.shape[1]}x{sr.shape[0]}")
        emap, factor = error_map(sr, hr)
        emap_path = out / f"{target.stem}_error.pgm"
        save_image(emap_path, emap, bits=args.bits)
        Path(f"{emap_path}.txt").write_text(f"stretch_factor = {factor!r}\n"
                                            f"# pixel = min(1, |SR - HR| * stretch_factor)\n")
        print(f"PSNR {format_db(psnr(sr, hr))} dB")
        print(f"SSIM {ssim(sr, hr):.6f}")
        print(f"error map {emap_path} (stretch factor {factor:.6g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import bicubic_resize, degrade_kspace, load_image, read_manifest
    from .metrics import format_db, psnr, ssim
    from .training import superresolve

    model, pipeline = _load_checked(args.checkpoint, args.scale, None)
    rows = ["image\tpsnr\tssim\tbicubic_psnr\tbicubic_ssim"]
    scores = []
    for path in read_manifest(args.manifest):
        hr = load_image(path)
        lr = degrade_kspace(hr, pipeline.scale)
        sr = np.clip(superresolve(model, lr), 0.0, 1.0)
        bi = np.clip(bicubic_resize(lr, pipeline.scale), 0.0, 1.0)
        row = (psnr(sr, hr), ssim(sr, hr), psnr(bi, hr), ssim(bi, hr))
        scores.append(row)
        rows.append(f"{Path(path).name}\t{format_db(row[0])}\t{row[1]:.6f}\t{format_db(row[2])}\t{row[3]:.6f}")
    means = [float(np.mean([r[i] for r in scores])) for i in range(4)]
    rows.append(f"mean\t{format_db(means[0])}\t{means[1]:.6f}\t{format_db(means[2])}\t{means[3]:.6f}")
    text = "\n".join(rows)
    print(text)
    if args.out_dir:
        (_ensure_dir(args.out_dir) / "eval.tsv").write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify / bench / make-phantoms
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import format_row, run_checks

    results = run_checks(faults=args.inject_fault or (), log=lambda row: print(format_row(row), flush=True))
    failed = [name for name, ok, _, _ in results if not ok]
    total = sum(r[3] for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} properties passed in {total:.1f}s")
    if failed:
        print("failing: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args) -> int:
    from .autodiff import default_dtype
    from .bench import format_bench, run_bench
    from .pipeline import ICONet, PipelineConfig, format_param_report, param_report

    dtype = np.float32 if args.dtype == "float32" else np.float64
    row = run_bench(args.op, args.size, args.channels, repeat=args.repeat, dtype=dtype)
    print(format_bench(row))
    cfg = PipelineConfig(scale=args.scale, channels=args.model_channels, rscfl_count=args.rscfl_count)
    with default_dtype(dtype):
        model = ICONet(cfg, np.random.default_rng(0))
    print()
    print(format_param_report(param_report(model, args.report_size, args.report_size)))
    return EXIT_OK


def cmd_make_phantoms(args) -> int:
    from .data import make_phantom, save_image, write_manifest

    out = _ensure_dir(args.out_dir)
    paths = []
    for i in range(args.count):
        path = out / f"phantom_{args.seed + i:04d}.pgm"
        save_image(path, make_phantom(args.seed + i, args.size), bits=16)
        paths.append(path.name)
    write_manifest(out / "manifest.txt", paths)
    print(f"wrote {args.count} phantoms and {out / 'manifest.txt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iconet", description="Progressive two-branch super-resolution toolkit.")
    parser.add_argument("--threads", type=int, default=None, help="intra-op threads (default 1, deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest of HR images")
    p.add_argument("--config", help="key = value configuration file")
    for key, kind in TRAIN_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
    p.add_argument("--share-stages", dest="share_stages", action="store_true", default=None)
    p.add_argument("--no-share-stages", dest="share_stages", action="store_false")
    p.add_argument("--verbose", action="store_true", help="echo log records to stdout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("superresolve", help="upscale one image with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--reference", help="HR image; enables the error map and PSNR/SSIM")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--output-name")
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_superresolve)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against bicubic on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical property suite")
    p.add_argument("--inject-fault", action="append", metavar="RULE", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time an operator and print a parameter report")
    p.add_argument("--op", required=True, help="scan, ss2d, conv or fuse")
    p.add_argument("--size", type=int, default=4096, help="sequence length (scan) or image side")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--model-channels", type=int, default=96)
    p.add_argument("--rscfl-count", type=int, default=7)
    p.add_argument("--report-size", type=int, default=32, help="LR input side for the FLOP estimate")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-phantoms", help="write synthetic phantoms and a manifest")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_make_phantoms)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .config import ConfigError
    from .data import ImageFormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    _set_threads(args.threads or 1)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
