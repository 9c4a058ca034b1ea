"""``flostream`` command line: synth, train, denoise, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 failed built-in self-check.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import ConfigError, NoiseSpec, VideoClip, denoiser_config_from, read_config, validate_config
from .data import ClipFormatError, SynthSpec, add_noise, clip_from_bytes, clip_to_bytes, read_clip, synth_clip, write_clip
from .eval import bench_topologies, psnr
from .flow import BlockMatchingFlow, FileFlow, FlowError, TranslationFlow, save_clip_flows
from .net import BiRNN, FloRNN, build_model
from .pipeline import StreamState, birnn_denoise, denoise_offline, forwardrnn_denoise
from .train import SynthSource, TrainingDiverged, distill_finetune, train_config_from, train_loop

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
STREAM_TOLERANCE = 1e-6

log = logging.getLogger("flostream")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo(title: str, values: dict) -> None:
    print(f"# resolved {title}")
    for key, value in values.items():
        print(f"{key} = {value}")
    sys.stdout.flush()


def _seed(explicit):
    if explicit is not None:
        return explicit
    env = os.environ.get("FLOSTREAM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FLOSTREAM_SEED must be an integer, got {env!r}") from None


def parse_provider(spec: str):
    """``block[:B,R]``, ``zero``, ``translate:dx,dy`` or ``file:TEMPLATE``."""
    kind, _, arg = spec.partition(":")
    if kind == "block":
        if not arg:
            return BlockMatchingFlow(8, 4, preblur=True)
        b, r = (int(v) for v in arg.split(","))
        return BlockMatchingFlow(b, r, preblur=True)
    if kind == "zero":
        return TranslationFlow((0.0, 0.0))
    if kind == "translate":
        dx, dy = (float(v) for v in arg.split(","))
        return TranslationFlow((dx, dy))
    if kind == "file":
        return FileFlow(arg)
    raise UsageError(f"unknown flow provider {spec!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    pattern = {"texture": "random-texture", "bars": "moving-bars"}.get(args.pattern, args.pattern)
    motion = tuple(int(v) for v in args.motion.split(","))
    if len(motion) != 2:
        raise UsageError("--motion takes dx,dy")
    seed = _seed(args.seed)
    spec = SynthSpec(pattern=pattern, motion=motion, T=args.T, height=args.size, width=args.size,
                     channels=args.channels, seed=seed, mode=args.mode)
    _echo("synth", {**dataclasses.asdict(spec), "sigma": args.sigma, "noise_kind": args.noise_kind})
    try:
        clean, fwd, bwd = synth_clip(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_clip(clean, args.out_clean)
    if args.out_noisy:
        noisy = add_noise(clean, NoiseSpec.from_255(args.sigma, args.noise_kind), seed)
        write_clip(noisy, args.out_noisy)
    if args.out_flows:
        template = save_clip_flows(args.out_flows, fwd, bwd)
        print(f"flows written with template {template}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = read_config(args.config)
    if args.iterations is not None:
        values["iterations"] = args.iterations
    if args.k is not None:
        values["k"] = args.k
    values["seed"] = _seed(args.seed if args.seed is not None else values.get("seed"))
    cfg = denoiser_config_from(values)
    tcfg = train_config_from(values)
    kind = values.get("model", "flornn")
    validate_config(cfg, (tcfg.patch_size, tcfg.patch_size))
    _echo("config", {"model": kind, **dataclasses.asdict(cfg), **dataclasses.asdict(tcfg)})
    if args.workers != 1:
        log.info("data loading runs in-process; --workers=%d has no effect on results", args.workers)

    source = SynthSource(size=tcfg.patch_size, T=tcfg.clip_length, channels=cfg.img_channels,
                         step=values.get("motion_max", 2))
    log_path = args.log or str(args.out) + ".log"
    if args.distill_teacher:
        teacher = load_checkpoint(args.distill_teacher)
        if not isinstance(teacher, BiRNN):
            raise UsageError("--distill-teacher must be a BiRNN checkpoint")
        student = build_model(cfg, "flornn", seed=tcfg.seed)
        model, history = distill_finetune(student, teacher, source, tcfg, log_path=log_path)
    else:
        model = build_model(cfg, kind, seed=tcfg.seed)
        model, history = train_loop(model, source, tcfg, log_path=log_path,
                                    ckpt_path=args.out, ckpt_fn=save_checkpoint)
    save_checkpoint(model, args.out)
    if history:
        last = history[-1]
        print(f"final iter={last['iter']} loss={last['loss']:.6f} psnr={last['psnr']:.4f}")
    else:
        print("final iter=0 (no training steps)")
    return EXIT_OK


def _read_input(path: str) -> VideoClip:
    if path == "-":
        return clip_from_bytes(sys.stdin.buffer.read(), "<stdin>")
    return read_clip(path)


def _write_output(clip: VideoClip, path: str) -> None:
    if path == "-":
        sys.stdout.buffer.write(clip_to_bytes(clip))
        sys.stdout.buffer.flush()
    else:
        write_clip(clip, path)


def cmd_denoise(args) -> int:
    if args.mode == "birnn" and args.input == "-":
        raise UsageError("--mode birnn is offline-only and cannot read a streaming stdin source")
    model = load_checkpoint(args.ckpt)
    cfg = model.cfg
    if args.config:
        file_cfg = denoiser_config_from(read_config(args.config))
        if file_cfg.k != cfg.k and args.k is None:
            raise UsageError(f"config k={file_cfg.k} differs from checkpoint k={cfg.k}; pass --k to override")
        cfg = dataclasses.replace(file_cfg, channels=cfg.channels, num_res_blocks=cfg.num_res_blocks,
                                  use_noise_map=cfg.use_noise_map, img_channels=cfg.img_channels)
    if args.k is not None:
        cfg = dataclasses.replace(cfg, k=args.k)
    if args.mode == "birnn" and not isinstance(model, BiRNN):
        raise UsageError("--mode birnn needs a BiRNN checkpoint")
    if args.mode != "birnn" and not isinstance(model, FloRNN):
        raise UsageError(f"--mode {args.mode} needs a FloRNN checkpoint")

    clip = _read_input(args.input)
    if clip.channels != cfg.img_channels:
        raise UsageError(f"clip has {clip.channels} channels, model expects {cfg.img_channels}")
    cfg = validate_config(cfg, clip.shape)
    provider = parse_provider(args.flow)
    sigma = args.sigma / 255.0
    out_target = args.out
    info = sys.stderr if out_target == "-" else sys.stdout
    print("# resolved config", file=info)
    for key, value in {"mode": args.mode, "sigma": args.sigma, "flow": args.flow,
                       **dataclasses.asdict(cfg)}.items():
        print(f"{key} = {value}", file=info)

    status = EXIT_OK
    if args.mode == "offline":
        out = denoise_offline(clip, model, provider, sigma, cfg)
    elif args.mode == "forward":
        out = forwardrnn_denoise(clip, model, provider, sigma, cfg)
    elif args.mode == "birnn":
        out = birnn_denoise(clip, model, provider, sigma)
    else:
        state = StreamState(model, provider, sigma, cfg, low_latency_head=args.low_latency_head)
        frames = []
        for frame in clip.frames:
            frames.extend(state.push(frame))
        frames.extend(state.flush())
        out = VideoClip(torch.stack(frames))
        if args.check:
            if args.low_latency_head:
                raise UsageError("--check compares against the offline path and needs the default head")
            ref = denoise_offline(clip, model, provider, sigma, cfg)
            diff = float((ref.frames - out.frames).abs().max())
            ok = diff < STREAM_TOLERANCE
            print(f"stream-vs-offline max_abs_diff={diff:.3e} {'PASS' if ok else 'FAIL'}", file=info)
            if not ok:
                status = EXIT_CHECK
    _write_output(out, out_target)
    if args.ref:
        ref_clip = read_clip(args.ref)
        print(f"psnr={psnr(out, ref_clip):.4f}", file=info)
    return status


def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",")]
    if any(t < 1 for t in lengths):
        raise UsageError("--lengths must be positive")
    seed = _seed(args.seed)
    cfg = denoiser_config_from({}, k=args.k, channels=args.channels, num_res_blocks=args.num_res_blocks,
                               border_margin=args.margin)
    validate_config(cfg, (args.size, args.size))
    _echo("bench", {**dataclasses.asdict(cfg), "lengths": lengths, "size": args.size, "seed": seed})
    flornn = build_model(cfg, "flornn", seed=seed)
    birnn = build_model(cfg, "birnn", seed=seed)
    report = bench_topologies(flornn, birnn, args.k, lengths, size=args.size, seed=seed)
    report.write(args.out)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flostream", description="Unidirectional recurrent video denoising.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic clip with exact flows")
    p.add_argument("--pattern", default="texture",
                   choices=["texture", "random-texture", "bars", "moving-bars", "checker"])
    p.add_argument("--motion", default="2,0", help="per-frame translation dx,dy in pixels")
    p.add_argument("--T", type=int, default=20, help="number of frames")
    p.add_argument("--size", type=int, default=96, help="frame height and width")
    p.add_argument("--channels", type=int, default=1, choices=[1, 3])
    p.add_argument("--mode", default="wrap", choices=["wrap", "fresh"], help="content wrap-around or camera pan")
    p.add_argument("--sigma", type=float, default=25.0, help="noise std on the 0-255 scale")
    p.add_argument("--noise-kind", default="awgn", choices=["awgn", "clipped-awgn"])
    p.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $FLOSTREAM_SEED)")
    p.add_argument("--out-clean", required=True, help="clean clip (.flov or directory)")
    p.add_argument("--out-noisy", help="noisy clip (.flov or directory)")
    p.add_argument("--out-flows", help="directory for FLOW1 files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on synthetic clips")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint path (.flop)")
    p.add_argument("--distill-teacher", help="BiRNN checkpoint to distil from")
    p.add_argument("--log", help="metrics log (default: <out>.log)")
    p.add_argument("--iterations", type=int, help="override the config's iteration count")
    p.add_argument("--k", type=int, help="override the config's look-ahead depth")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--workers", type=int, default=1, help="data-loading workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise a clip")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True, help="clip (.flov, frame directory or - for stdin)")
    p.add_argument("--out", required=True, help="output clip (.flov, directory or - for stdout)")
    p.add_argument("--sigma", type=float, required=True, help="noise std on the 0-255 scale")
    p.add_argument("--mode", default="offline", choices=["offline", "stream", "forward", "birnn"])
    p.add_argument("--k", type=int, help="override the look-ahead depth")
    p.add_argument("--config", help="config file whose alignment settings apply")
    p.add_argument("--flow", default="block", help="block[:B,R] | zero | translate:dx,dy | file:TEMPLATE")
    p.add_argument("--ref", help="clean reference clip; prints PSNR")
    p.add_argument("--check", action="store_true", help="stream mode: compare against offline output")
    p.add_argument("--low-latency-head", action="store_true",
                   help="stream mode: emit frame 1 immediately with clamped look-ahead")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("bench", help="memory and latency of forward / FloRNN / BiRNN")
    p.add_argument("--lengths", default="5,10,20,40", help="comma-separated sequence lengths")
    p.add_argument("--k", type=int, default=3, help="FloRNN look-ahead depth")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--size", type=int, default=32, help="frame size")
    p.add_argument("--channels", type=int, default=16, help="feature channels")
    p.add_argument("--num-res-blocks", type=int, default=2)
    p.add_argument("--margin", type=int, default=4, help="border margin in pixels")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ClipFormatError) as exc:
        print(f"flostream: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"flostream: error: file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"flostream: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FlowError, RuntimeError, ValueError, OSError) as exc:
        print(f"flostream: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
