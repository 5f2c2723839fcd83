"""Command line entry point: ``nvclab <command> ...`` (or ``python3 -m nvclab``).

Exit codes: 0 success, 1 usage, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .codec import LAMBDAS, ModelFormatError, default_model, init_model, load_model, pretrain, save_model
from .codec import training_sequences
from .entropy import RangeCoderError
from .harness import ablate, format_ablation, load_job, run_eval
from .metrics import bd_rate, fluctuation_csv, read_curve_csv
from .pipeline import MODES, BitstreamError, GopConfig, InvariantError, decode_sequence, encode_sequence
from .refiner import RefineConfig
from .video_io import (RawVideo, VideoFormatError, gen_synthetic, read_y4m, read_yuv420,
                       rgb_to_yuv420, to_rgb_bt709, write_y4m)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

log = logging.getLogger("nvclab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def read_frames(path, width=None, height=None, frames=None) -> list:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise VideoFormatError(f"expected [T, 3, H, W] array, got {arr.shape}")
        return [a.astype(np.float32) for a in arr[:frames]]
    if path.suffix == ".yuv":
        if width is None or height is None:
            raise VideoFormatError("raw .yuv input needs --width and --height")
        raw = read_yuv420(path.read_bytes(), width, height, frames)
    else:
        raw = read_y4m(path.read_bytes())
    n = raw.frame_count if frames is None else min(frames, raw.frame_count)
    return [to_rgb_bt709(raw, i) for i in range(n)]


def write_frames(frames, path) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.stack(frames).astype(np.float32))
        return
    _, h, w = frames[0].shape
    raw = RawVideo(w, h, len(frames), frames=[rgb_to_yuv420(f) for f in frames])
    path.write_bytes(write_y4m(raw))


def _model(path):
    if path:
        return load_model(path)
    cache = os.environ.get("NVCLAB_CACHE", os.path.expanduser("~/.cache/nvclab"))
    return default_model(cache_dir=cache)


def cmd_gen_data(a) -> int:
    frames = gen_synthetic(a.seed, a.width, a.height, a.frames, a.motion)
    write_frames(frames, a.out)
    print(f"wrote {len(frames)} frames {a.width}x{a.height} ({a.motion}) to {a.out}")
    return EXIT_OK


def cmd_pretrain(a) -> int:
    model = init_model(a.seed)
    history = []
    model = pretrain(model, training_sequences(a.seed), a.steps, seed=a.seed, history=history)
    save_model(model, a.out_model)
    if history:
        print(f"loss {history[0]:.4f} -> {np.mean(history[-50:]):.4f} over {a.steps} steps")
    print(f"wrote {a.out_model} (sha256 {model.checksum().hex()[:16]})")
    return EXIT_OK


def cmd_encode(a) -> int:
    model = _model(a.model)
    frames = read_frames(a.input, a.width, a.height, a.frames)
    config = RefineConfig(lmbda=float(a.lmbda), max_iters=a.iters, seed=a.seed,
                          dynamic_rd=a.mode == "refine_dynamic")
    gop = GopConfig(intra_period=a.intra_period, frames_to_code=len(frames))
    result = encode_sequence(frames, model, config, gop, a.mode)
    Path(a.out).write_bytes(result.bitstream.to_bytes())
    if a.stats_csv:
        fluctuation_csv(result.stats, a.stats_csv)
    print(f"{len(frames)} frames  {result.bpp:.4f} bpp  {result.psnr:.2f} dB  -> {a.out}")
    return EXIT_OK


def cmd_decode(a) -> int:
    model = _model(a.model)
    frames = decode_sequence(Path(a.bitstream).read_bytes(), model)
    write_frames(frames, a.out)
    print(f"decoded {len(frames)} frames -> {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    report = run_eval(load_job(a.job))
    for name, entry in report["sequences"].items():
        for mode, value in entry["bd_rate"].items():
            shown = "n/a" if value is None else f"{value:+.3f}%"
            print(f"{name:<16}{mode:<16}BD-rate {shown}")
    for err in report["errors"]:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_DATA if report["errors"] else EXIT_OK


def cmd_bdrate(a) -> int:
    value = bd_rate(read_curve_csv(a.anchor, "anchor"), read_curve_csv(a.test, "test"))
    print(f"BD-rate: {value:+.4f}%")
    return EXIT_OK


def cmd_ablate(a) -> int:
    model = _model(a.model)
    if a.input:
        seq = {"name": Path(a.input).stem, "y4m": str(a.input), "frames": a.frames}
    else:
        seq = {"name": f"synthetic{a.seed}", "seed": a.seed, "width": a.width or 64,
               "height": a.height or 64, "frames": a.frames, "motion": a.motion}
    table = ablate(seq, model, a.out_dir, max_iters=a.iters, frames_to_code=a.frames)
    print(format_ablation(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvclab", description="Latent refinement for a small conditional video codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a seeded synthetic sequence (.y4m or .npy)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--frames", type=int, default=96)
    g.add_argument("--motion", choices=("pan", "noise", "mixed"), default="mixed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train the frozen codec and write a model file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--out-model", required=True)
    t.set_defaults(func=cmd_pretrain)

    def io_args(s):
        s.add_argument("--width", type=int)
        s.add_argument("--height", type=int)
        s.add_argument("--frames", type=int, default=96)

    e = sub.add_parser("encode", help="encode a sequence at one rate point")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--model", help="model file (default: cached pretrained model)")
    e.add_argument("--lambda", dest="lmbda", type=float, choices=LAMBDAS, default=1360.0)
    e.add_argument("--mode", choices=MODES, default="refine_dynamic")
    e.add_argument("--iters", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--intra-period", type=int, default=32)
    e.add_argument("--out", required=True)
    e.add_argument("--stats-csv")
    io_args(e)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a bitstream")
    d.add_argument("--bitstream", required=True)
    d.add_argument("--model")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="run an evaluation job file")
    v.add_argument("job")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate of a test curve against an anchor (CSV: bpp,psnr)")
    b.add_argument("anchor")
    b.add_argument("test")
    b.set_defaults(func=cmd_bdrate)

    a = sub.add_parser("ablate", help="Model A/B/C table on one sequence")
    a.add_argument("--in", dest="input", help=".y4m sequence (default: synthetic)")
    a.add_argument("--model")
    a.add_argument("--seed", type=int, default=1)
    a.add_argument("--motion", choices=("pan", "noise", "mixed"), default="mixed")
    a.add_argument("--iters", type=int, default=100)
    a.add_argument("--out-dir", default="ablation")
    io_args(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, VideoFormatError, ModelFormatError, BitstreamError, RangeCoderError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
